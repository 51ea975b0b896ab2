"""Config-file handling and end-to-end CLI flows."""

import numpy as np
import pytest

from convmotion import cli
from convmotion import config as C
from convmotion import mocap
from convmotion import model as M


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------


def test_default_config_is_the_reference_operating_point():
    text = C.default_config_text()
    expected = {
        "seed_frames": "50",
        "target_frames": "25",
        "window": "20",
        "eta": "1.0",
        "lambda_l2": "0.001",
        "lambda_adv": "0.01",
        "learning_rate": "0.0002",
        "batch_size": "64",
        "dropout": "0.5",
        "leaky_slope": "0.2",
        "channels": "64,128,128",
        "fc_out": "512",
        "kernel": "2x7",
        "stride": "2x2",
        "no_long_term": "false",
        "adversarial": "true",
    }
    got = dict(line.split("=", 1) for line in text.strip().split("\n"))
    assert got == expected


def test_config_round_trip():
    hp = M.HyperParams(window=10, kernel=(7, 2), adversarial=False)
    parsed = C.parse_config_text(C.format_config(hp))
    assert C.hyperparams_from_mapping(parsed) == hp


def test_config_rejects_unknown_key():
    with pytest.raises(ValueError, match="unknown key"):
        C.parse_config_text("not_a_key=3\n")


def test_config_parses_comments_and_blanks():
    cfg = C.parse_config_text("# comment\n\nwindow=10  # trailing\n")
    assert cfg == {"window": 10}


def test_config_bad_value_reports_line():
    with pytest.raises(ValueError, match="line 2"):
        C.parse_config_text("window=10\neta=notafloat\n")


# ---------------------------------------------------------------------------
# CLI flows
# ---------------------------------------------------------------------------

MICRO_FLAGS = ["--seed-frames", "6", "--target-frames", "3", "--window", "4",
               "--channels", "2,3,3", "--fc-out", "8", "--dropout", "0.0",
               "--batch-size", "2"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    rc = cli.main(["synth", "--out", str(root / "data"), "--actions", "walk,wave",
                   "--joints", "2", "--frames", "60", "--seed", "3"])
    assert rc == 0
    manifest = root / "data" / "manifest.json"
    stats = root / "stats.json"
    rc = cli.main(["prep", "--data", str(manifest), "--out", str(stats)])
    assert rc == 0
    return manifest, stats


def test_prep_reduced_dim(corpus, capsys):
    manifest, stats_path = corpus
    stats = mocap.NormalizationStats.load(stats_path)
    assert stats.reduced_dim == 6  # 2 joints x 3 dims


def test_train_predict_eval_pipeline(corpus, tmp_path, capsys):
    manifest, stats_path = corpus
    out_dir = tmp_path / "run"
    rc = cli.main(["train", "--data", str(manifest), "--stats", str(stats_path),
                   "--out", str(out_dir), "--iters", "5", "--seed", "1",
                   "--checkpoint-every", "5", "--no-adv"] + MICRO_FLAGS)
    assert rc == 0
    ckpt = capsys.readouterr().out.strip().splitlines()[-1]
    assert (out_dir / "report.csv").exists()
    report_lines = (out_dir / "report.csv").read_text().strip().split("\n")
    assert len(report_lines) == 6  # header + 5 iterations

    # predict from one of the test trials
    seed_file = manifest.parent / "S5" / "walk_1.txt"
    pred_file = tmp_path / "pred.txt"
    rc = cli.main(["predict", "--checkpoint", ckpt, "--stats", str(stats_path),
                   "--seed-file", str(seed_file), "--out", str(pred_file)])
    assert rc == 0
    pred = mocap.parse_trial(pred_file.read_text())
    assert pred.frames.shape[0] == 3

    rc = cli.main(["eval", "--checkpoint", ckpt, "--data", str(manifest),
                   "--stats", str(stats_path), "--num-sequences", "2",
                   "--seed", "0", "--horizons", "80,120",
                   "--out", str(tmp_path / "eval.csv")])
    assert rc == 0
    table = capsys.readouterr().out
    assert "Average" in table
    csv = (tmp_path / "eval.csv").read_text()
    assert csv.startswith("action,ms,error")


def test_predict_zero_decoder_repeats_last_frame(corpus, tmp_path):
    manifest, stats_path = corpus
    stats = mocap.NormalizationStats.load(stats_path)
    hp = M.HyperParams(seed_frames=6, target_frames=3, window=4,
                       channels=(2, 3, 3), fc_out=8, dropout=0.0)
    # freshly initialized parameters carry a zeroed final decoder layer
    params = M.init_params(hp, stats.reduced_dim, np.random.default_rng(0))
    ckpt_path = tmp_path / "zero.ckpt"
    M.save_checkpoint(ckpt_path, hp, stats.reduced_dim, stats.fingerprint(),
                      M.tensors_from_params(params))

    seed_file = manifest.parent / "S5" / "wave_1.txt"
    out_file = tmp_path / "pred.txt"
    rc = cli.main(["predict", "--checkpoint", str(ckpt_path), "--stats",
                   str(stats_path), "--seed-file", str(seed_file), "--out",
                   str(out_file)])
    assert rc == 0
    pred = mocap.parse_trial(out_file.read_text()).frames
    assert pred.shape == (3, stats.raw_dim)
    trial = mocap.load_trial(seed_file)
    last_norm = mocap.normalize_frames(trial.frames[-1:], stats)
    expected = mocap.denormalize_frames(last_norm, stats)[0]
    for row in pred:
        np.testing.assert_allclose(row, expected, atol=1e-12)


def test_eval_checkpoint_stats_mismatch_fails(corpus, tmp_path):
    manifest, stats_path = corpus
    hp = M.HyperParams(seed_frames=6, target_frames=3, window=4,
                       channels=(2, 3, 3), fc_out=8)
    params = M.init_params(hp, 6, np.random.default_rng(0))
    bad = tmp_path / "bad.ckpt"
    M.save_checkpoint(bad, hp, 6, "0" * 64, M.tensors_from_params(params))
    with pytest.raises(ValueError, match="stats"):
        cli.main(["eval", "--checkpoint", str(bad), "--data", str(manifest),
                  "--stats", str(stats_path), "--horizons", "80"])


def test_ablate_kernel_axis_three_rows(corpus, tmp_path, capsys):
    manifest, stats_path = corpus
    out = tmp_path / "ablate.csv"
    rc = cli.main(["ablate", "--axis", "kernel", "--data", str(manifest),
                   "--stats", str(stats_path), "--out", str(out),
                   "--iters", "3", "--num-sequences", "2"] + MICRO_FLAGS
                  + ["--no-adv"])
    assert rc == 0
    lines = out.read_text().strip().split("\n")
    assert len(lines) == 4  # header + one row per kernel shape
    assert lines[1].startswith("kernel,2x7,")
    assert lines[2].startswith("kernel,7x2,")
    assert lines[3].startswith("kernel,4x4,")


def test_gradcheck_cli_micro_passes(capsys):
    rc = cli.main(["gradcheck", "--seeds", "1", "--pose-dim", "6",
                   "--seed-frames", "6", "--target-frames", "2", "--window", "4",
                   "--channels", "2,3,3", "--fc-out", "8"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "PASS" in out


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        cli.main(["train", "--no-such-flag"])
    assert exc.value.code == 2


def test_flags_override_config_file(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("window=10\neta=0.25\n")
    parser = cli.build_parser()
    args = parser.parse_args(["train", "--data", "x", "--stats", "y", "--out",
                              "z", "--config", str(cfg), "--window", "5"])
    hp = cli._resolve_hyper(args)
    assert hp.window == 5      # flag wins
    assert hp.eta == 0.25      # config file survives where no flag given
