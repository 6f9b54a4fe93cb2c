import json
from pathlib import Path

import numpy as np
import pytest

from spikeflow.ann import NetworkConfig, init_params
from spikeflow.checkpoint import save_checkpoint
from spikeflow.cli import build_parser, main
from spikeflow.data import load_sample
from spikeflow.events import parse_event_file, read_flow_file, read_pgm
from spikeflow.tensor import Tensor

GOLDEN = Path(__file__).parent / "golden"
COMMANDS = ["synth", "encode", "train", "eval", "energy", "inspect-checkpoint"]

# Regenerate after an intentional flag change with:
#   for c in "" synth encode train eval energy inspect-checkpoint; do
#     COLUMNS=80 spikeflow $c --help > tests/golden/help_${c:-main}.txt; done


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize("command", [None] + COMMANDS)
def test_help_matches_golden_and_lists_every_flag(command, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "80")
    argv = ["--help"] if command is None else [command, "--help"]
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0
    text = capsys.readouterr().out
    assert text == (GOLDEN / f"help_{command or 'main'}.txt").read_text(encoding="utf-8")
    parser = build_parser()
    if command is not None:
        parser = parser._subparsers._group_actions[0].choices[command]
    for action in parser._actions:
        for flag in action.option_strings:
            assert flag in text


def test_unknown_flag_and_missing_required_exit_1(capsys):
    code, _, err = run(["synth", "--out-dir", "x", "--bogus"], capsys)
    assert code == 1 and "usage:" in err and "--bogus" in err
    code, _, err = run(["eval", "--data-dir", "x"], capsys)
    assert code == 1 and "--checkpoint" in err


def test_synth_zero_flow_writes_empty_event_file(tmp_path, capsys):
    code, out, _ = run(["synth", "--texture", "smooth", "--size", "16", "--out-dir", tmp_path / "s"], capsys)
    assert code == 0 and "wrote 0 events" in out
    stream = parse_event_file(tmp_path / "s" / "events.aer")
    assert len(stream) == 0 and (stream.width, stream.height) == (16, 16)


def test_synth_ramp_round_trip_and_determinism(tmp_path, capsys):
    argv = ["synth", "--texture", "ramp", "--size", "12", "--flow-u", "2", "--flow-v", "0", "--theta", "0.02"]
    assert run(argv + ["--out-dir", tmp_path / "a"], capsys)[0] == 0
    assert run(argv + ["--out-dir", tmp_path / "b"], capsys)[0] == 0
    for name in ("events.aer", "image0.pgm", "image1.pgm", "flow.flo"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    stream = parse_event_file(tmp_path / "a" / "events.aer")
    first, t0 = read_pgm(tmp_path / "a" / "image0.pgm")
    _, t1 = read_pgm(tmp_path / "a" / "image1.pgm")
    flow = read_flow_file(tmp_path / "a" / "flow.flo")
    assert len(stream) > 0 and first.shape == (12, 12) == (stream.height, stream.width)
    assert (t0, t1) == (0, 50000)
    np.testing.assert_array_equal(flow[0], 2.0)
    sample = load_sample(tmp_path / "a", 5)
    assert sample.frames.shape == (5, 4, 12, 12) and sample.frames.any()


def test_synth_unwritable_directory_exits_2(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["synth", "--out-dir", blocker / "sub"], capsys)[0] == 2


def test_encode_prints_channel_counts(tmp_path, capsys):
    run(["synth", "--texture", "ramp", "--size", "12", "--flow-u", "1", "--theta", "0.02",
         "--out-dir", tmp_path / "s"], capsys)
    code, out, _ = run(["encode", "--events", tmp_path / "s" / "events.aer", "--n-frames", "2",
                        "--t-start", "0", "--t-end", "50000", "--out", tmp_path / "f.npy"], capsys)
    assert code == 0
    frames = np.load(tmp_path / "f.npy")
    lines = out.strip().splitlines()
    assert lines[0] == "frame former_on former_off latter_on latter_off"
    for n, line in enumerate(lines[1:]):
        assert [int(v) for v in line.split()[1:]] == [int(c) for c in frames[n].sum(axis=(1, 2))]
    assert run(["encode", "--events", tmp_path / "missing.aer"], capsys)[0] == 2


def write_config(path, **kw):
    base = dict(dt_mode="dt1", base_width=2, batch_size=1, crop_size=32, epochs=1, lr=1e-3, seed=0)
    base.update(kw)
    path.write_text("".join(f"{k} = {v}\n" for k, v in base.items()))
    return path


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_data")
    assert main(["synth", "--random-flows", "2", "--size", "32", "--theta", "0.08", "--seed", "3",
                 "--out-dir", str(out)]) == 0
    return out


def test_train_is_deterministic_and_prints_summary(data_dir, tmp_path, capsys):
    cfg = write_config(tmp_path / "c.txt")
    code, out, _ = run(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", tmp_path / "a"], capsys)
    assert code == 0 and "final loss" in out and "iterations 2" in out
    run(["train", "--config", cfg, "--data-dir", data_dir, "--out-dir", tmp_path / "b"], capsys)
    assert (tmp_path / "a" / "loss.csv").read_bytes() == (tmp_path / "b" / "loss.csv").read_bytes()
    code, out, _ = run(["inspect-checkpoint", "--checkpoint", tmp_path / "a" / "checkpoint.sfn"], capsys)
    assert code == 0 and "dec1.weight" in out and "train.final_loss" in out


def test_train_errors(data_dir, tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("dt_mode = dt1\nwarmup = 3\n")
    code, _, err = run(["train", "--config", bad, "--data-dir", data_dir, "--out-dir", tmp_path / "o"], capsys)
    assert code == 1 and "warmup" in err
    cfg = write_config(tmp_path / "c.txt")
    code, _, _ = run(["train", "--config", cfg, "--data-dir", tmp_path / "nope", "--out-dir", tmp_path / "o"], capsys)
    assert code == 2


def gt_checkpoint(data_dir, path):
    sample = load_sample(data_dir / "sample_000", 5)
    net = NetworkConfig(base_width=2, n_frames=5, threshold=0.75)
    params = {k: Tensor(np.zeros_like(p.data)) for k, p in init_params(net, 0).items()}
    params["flow4.bias"].data[:] = sample.flow[:, 0, 0]
    save_checkpoint(path, net, params)
    return path


def test_eval_gt_fixture_prints_zero(data_dir, tmp_path, capsys):
    ck = gt_checkpoint(data_dir, tmp_path / "gt.sfn")
    code, out, _ = run(["eval", "--checkpoint", ck, "--data-dir", data_dir / "sample_000",
                        "--out-dir", tmp_path / "e"], capsys)
    assert code == 0
    assert out.splitlines()[0].startswith("sample_000 aee 0.000 ")
    assert (tmp_path / "e" / "aee.csv").exists() and (tmp_path / "e" / "summary.json").exists()


def test_eval_digest_mismatch_exits_1(data_dir, tmp_path, capsys):
    ck = gt_checkpoint(data_dir, tmp_path / "gt.sfn")
    code, _, err = run(["eval", "--checkpoint", ck, "--data-dir", data_dir, "--dt-mode", "dt4"], capsys)
    assert code == 1 and "digest" in err
    assert run(["eval", "--checkpoint", tmp_path / "none.sfn", "--data-dir", data_dir], capsys)[0] == 2


def test_energy_always_spiking_is_100_percent(capsys):
    code, out, _ = run(["energy", "--activity", "1", "--n-frames", "1", "--base-width", "4",
                        "--height", "32", "--width", "32"], capsys)
    assert code == 0 and "normalized 100%" in out


def test_energy_toy_hand_arithmetic(tmp_path, capsys):
    code, _, _ = run(["energy", "--activity", "0.25", "--n-frames", "2", "--base-width", "1",
                      "--height", "16", "--width", "16", "--out-dir", tmp_path], capsys)
    assert code == 0
    rep = json.loads((tmp_path / "energy.json").read_text())
    # widths 1,2,4,8 on 16x16: M*C = 64*36 + 32*9 + 16*18 + 8*36
    assert rep["ann_ops"] == 2304 + 288 + 288 + 288 == 3168
    assert rep["snn_ops"] == pytest.approx(3168 * 0.25 * 2)
    assert rep["normalized_ops_percent"] == pytest.approx(50.0)
    assert rep["encoder_energy_benefit"] == pytest.approx(10.2)
    # analog residual blocks and decoder at this size: 52432 multiply-accumulates
    assert rep["network_ann_ops"] == 3168 + 52432
    share = 3168 / (3168 + 52432)
    assert rep["overall_energy_reduction_percent"] == pytest.approx(100 * share * (1 - 0.5 / 5.1))


def test_energy_requires_activity_source(capsys):
    assert run(["energy"], capsys)[0] == 1
