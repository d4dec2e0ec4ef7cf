import json
import subprocess
import sys

import pytest

from unmaskrl.cli import run
from unmaskrl.config import load_config, load_env_spec_file, parse_lines
from unmaskrl.errors import ConfigError
from unmaskrl.evalharness import read_csv

TINY = [
    "--set", "env.kind=noisy_cycle", "--set", "env.vocab_size=3", "--set", "env.answer_len=6",
    "--set", "policy.hidden=16", "--set", "policy.ff=32", "--set", "policy.time_embed_dim=8",
    "--set", "train.group_size=3", "--set", "train.batch_prompts=2", "--set", "train.n_prompts=4",
    "--set", "train.warmup_steps=1",
]


def test_empty_config_defaults():
    cfg = load_config()
    assert (cfg.train.lr, cfg.train.warmup_steps, cfg.train.group_size) == (3e-5, 100, 8)
    assert (cfg.train.clip_eps, cfg.policy.hidden, cfg.seed) == (0.5, 128, 0)


def test_override_alpha():
    assert load_config(overrides=["train.alpha=3"]).alpha == 3.0


@pytest.mark.parametrize(
    "override,needle",
    [("train.clip_eps=1.5", "clip_eps"), ("train.bogus=1", "bogus"), ("train.group_size=two", "group_size"),
     ("nosuch.key=1", "nosuch"), ("env.block_len=5", "block_len")],
)
def test_bad_overrides_name_the_key(override, needle):
    with pytest.raises(ConfigError, match=needle):
        load_config(overrides=[override])


def test_sections_and_roundtrip(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[train]\nalpha = 2  # comment\nes = true\n[eval]\nthreshold.grid = 0.5, 0.9\nrun.seed = 4\n")
    cfg = load_config(path)
    assert cfg.alpha == 2.0 and cfg.train.es and cfg.train.clip_eps == 0.2
    assert cfg.eval.threshold_grid == (0.5, 0.9) and cfg.seed == 4
    again = tmp_path / "again.cfg"
    again.write_text(cfg.to_text())
    assert load_config(again).to_text() == cfg.to_text()


def test_parse_lines_rejects_garbage():
    with pytest.raises(ConfigError, match=":2:"):
        parse_lines("a.b = 1\nnot a pair\n")


def test_env_spec_file(tmp_path):
    path = tmp_path / "chain.txt"
    path.write_text("vocab_size = 2\ninitial_dist = 0.5 0.5\ntransition = 1 0, 0 1\nprompt_len = 1\nanswer_len = 3\n")
    spec, mode = load_env_spec_file(path)
    assert spec.transition.tolist() == [[1, 0], [0, 1]] and mode is None
    path.write_text("vocab_size = 2\n")
    with pytest.raises(ConfigError, match="missing"):
        load_env_spec_file(path)


def test_verify_exits_zero(tmp_path, capsys):
    assert run(["verify", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "report.txt").exists()
    assert (tmp_path / "resolved_config").exists()
    assert (tmp_path / "seed").read_text() == "0\n"


def test_bad_config_exits_with_one_line(tmp_path, capsys):
    assert run(["oracle", "--out", str(tmp_path), "--set", "train.clip_eps=1.5"]) == 2
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1


def test_oracle_command(tmp_path):
    args = ["oracle", "--out", str(tmp_path), "--set", "env.answer_len=4", "--set", "eval.alpha=1"]
    assert run(args) == 0
    out = json.loads((tmp_path / "oracle.json").read_text())
    assert out["best_reward"] == 0.75 and out["steps"] == 1


def test_train_then_eval_pipeline(tmp_path):
    tr = tmp_path / "train"
    assert run(["train", "--out", str(tr), "--seed", "3", *TINY]) == 0
    assert (tr / "final.uprl").exists() and (tr / "metrics.csv").exists()
    ev = tmp_path / "eval"
    args = ["eval", "--out", str(ev), "--seed", "3", *TINY, "--set", f"eval.checkpoints={tr / 'final.uprl'}",
            "--set", "eval.tau_pi=0.5,1.0", "--set", "eval.n_eval=8", "--set", "eval.seeds=0"]
    assert run(args) == 0
    rows = read_csv(ev / "pareto.csv")
    assert sorted(r.param for r in rows) == ["alpha=1;tau_pi=0.5", "alpha=1;tau_pi=1"]


def test_eval_without_checkpoints_is_config_error(tmp_path):
    assert run(["eval", "--out", str(tmp_path)]) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "unmaskrl.cli", "oracle", "--out", str(tmp_path), "--set", "env.answer_len=3"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["steps"] == 1
