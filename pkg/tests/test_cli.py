import csv
import json

import numpy as np
import pytest

from uoep import cli
from uoep.cli import (SUBCOMMANDS, UsageError, default_config, emit_metrics, format_config,
                      load_run, main, parse_config_text, resolve_train_config)
from uoep.env import load_population, write_interaction_log
from uoep.trainer import TrainingAborted, empty_record

TINY = """
# small enough to train in a second or two
total_steps = 40
eval_interval = 20
batch_size = 8
n_quantiles = 4
n_target_quantiles = 4
n_cvar_samples = 2
n_inference_samples = 4
eval_episodes = 3
actor_hidden = 8
critic_hidden = 16, 8
num_users = 20
num_items = 30
dim = 4
final_eval_episodes = 5
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return str(path)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--seed", "7", "--out", str(root / "run")]) == 0
    return root / "run", str(cfg)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfig:
    def test_defaults_cover_training_and_population(self):
        cfg = default_config()
        assert cfg["m"] == 5 and cfg["lam"] == 16.0 and cfg["ablation"] == "none"
        assert cfg["num_users"] == 200 and cfg["list_size"] == 10

    def test_parse_types_and_comments(self):
        cfg = parse_config_text("seed = 3  # trailing\nalphas = 0.5, 1.0\nm = 2\n"
                                "deterministic_critic = true\nhorizon = none\n")
        assert cfg["seed"] == 3 and cfg["alphas"] == (0.5, 1.0)
        assert cfg["deterministic_critic"] is True and cfg["horizon"] is None

    def test_unknown_key_names_the_line(self):
        with pytest.raises(UsageError, match=r"f\.cfg:2: unknown key 'sigma'"):
            parse_config_text("seed = 1\nsigma = 2\n", source="f.cfg")

    @pytest.mark.parametrize("text", ["seed = x", "deterministic_critic = maybe", "no equals"])
    def test_bad_lines(self, text):
        with pytest.raises(UsageError):
            parse_config_text(text)

    def test_format_roundtrip(self):
        cfg = parse_config_text("m = 2\nalphas = 0.3, 1.0\nhorizon = 50\nnoise = 0.25\n")
        assert parse_config_text(format_config(cfg)) == cfg

    def test_m_alone_gives_uniform_grid(self):
        tc = resolve_train_config(parse_config_text("m = 4"))
        assert tc.population.alphas == (0.25, 0.5, 0.75, 1.0)

    def test_mismatched_alphas_rejected(self):
        with pytest.raises(UsageError):
            resolve_train_config(parse_config_text("m = 3\nalphas = 0.5, 1.0"))

    def test_ablation_applied(self):
        tc = resolve_train_config(parse_config_text("ablation = no-sta"))
        assert tc.no_sta and not tc.no_div


class TestExitCodes:
    def test_unknown_key_exits_2(self, tmp_path, capsys):
        path = tmp_path / "bad.cfg"
        path.write_text("seed = 1\nwidth = 3\n")
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
        assert "bad.cfg:2" in capsys.readouterr().err

    def test_unknown_subcommand_exits_2(self, capsys):
        assert main(["fly"]) == 2

    def test_missing_run_flag_exits_2(self, capsys):
        assert main(["evaluate"]) == 2

    def test_ablate_needs_variant(self, tiny_config, tmp_path):
        assert main(["ablate", "--config", tiny_config, "--out", str(tmp_path / "o")]) == 2

    def test_bad_env_spec(self, tiny_config, tmp_path):
        assert main(["train", "--config", tiny_config, "--env", "remote",
                     "--out", str(tmp_path / "o")]) == 2

    def test_malformed_log_exits_3(self, tiny_config, tmp_path, capsys):
        log = tmp_path / "log.csv"
        log.write_text("user_id,item_id,label,timestamp\n0,1,7,0.0\n")
        assert main(["train", "--config", tiny_config, "--env", f"csv:{log}",
                     "--out", str(tmp_path / "o")]) == 3
        assert "line 2" in capsys.readouterr().err

    def test_missing_run_dir_exits_3(self, tmp_path):
        assert main(["evaluate", "--run", str(tmp_path / "nothing"),
                     "--out", str(tmp_path / "o")]) == 3

    def test_aborted_run_is_written_and_exits_3(self, tiny_config, tmp_path, monkeypatch):
        real_train = cli.train

        def failing(tc, env, callback=None):
            raise TrainingAborted("step 3: gradient is nan", real_train(
                cli.replace(tc, total_steps=20), env))
        monkeypatch.setattr(cli, "train", failing)
        out = tmp_path / "o"
        assert main(["train", "--config", tiny_config, "--out", str(out)]) == 3
        assert (out / "checkpoints" / "critic.bin").exists()
        assert len((out / "metrics.jsonl").read_text().splitlines()) == 1

    def test_help_lists_subcommands(self, capsys):
        assert main(["--help"]) == 0
        out = capsys.readouterr().out
        assert all(name in out for name in SUBCOMMANDS)


class TestEmitMetrics:
    def test_empty_stream(self, tmp_path):
        emit_metrics([], tmp_path, 3)
        assert (tmp_path / "metrics.jsonl").read_text() == ""
        assert _rows(tmp_path / "curves.csv") == [["step", "actor_0", "actor_1", "actor_2"]]

    def test_single_record_gets_every_key(self, tmp_path):
        emit_metrics([{"step": 5, "per_actor_return": [1.5, 2.0]}], tmp_path, 2)
        rec = json.loads((tmp_path / "metrics.jsonl").read_text())
        assert set(rec) == set(empty_record()) and rec["gini"] is None
        assert _rows(tmp_path / "curves.csv")[1] == ["5", "1.5", "2.0"]

    def test_forty_evaluations(self, tmp_path):
        r = np.random.default_rng(0)
        recs = [{"step": 500 * (k + 1), "per_actor_return": r.normal(size=5).tolist()}
                for k in range(40)]
        emit_metrics(recs, tmp_path, 5)
        rows = _rows(tmp_path / "curves.csv")
        assert len(rows) == 41 and all(len(row) == 6 for row in rows)
        assert float(rows[7][3]) == recs[6]["per_actor_return"][2]
        assert len((tmp_path / "metrics.jsonl").read_text().splitlines()) == 40

    def test_nan_refused(self, tmp_path):
        with pytest.raises(ValueError):
            emit_metrics([{"step": 1, "gini": float("nan")}], tmp_path, 1)


class TestRuns:
    def test_train_outputs(self, trained_run):
        run, _ = trained_run
        for name in ("config.txt", "seed.json", "metrics.jsonl", "curves.csv"):
            assert (run / name).exists()
        names = {p.name for p in (run / "checkpoints").iterdir()}
        assert {"critic.bin", "bandit.json", "config.txt"} <= names
        assert {f"actor_{i}.bin" for i in range(5)} <= names
        assert json.loads((run / "seed.json").read_text())["seed"] == 7
        assert len((run / "metrics.jsonl").read_text().splitlines()) == 2

    def test_same_seed_same_metrics(self, trained_run, tmp_path):
        run, cfg = trained_run
        assert main(["train", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "b" / "metrics.jsonl").read_bytes() == \
            (run / "metrics.jsonl").read_bytes()

    def test_load_run(self, trained_run):
        cfg, pop, critic, bandit = load_run(trained_run[0])
        assert cfg["seed"] == 7 and len(pop) == 5 and not critic.deterministic
        assert [a.alpha for a in pop] == [0.2, 0.4, 0.6, 0.8, 1.0]

    def test_evaluate(self, trained_run, tmp_path, capsys):
        run, _ = trained_run
        out = tmp_path / "ev"
        assert main(["evaluate", "--run", str(run), "--episodes", "4", "--out", str(out)]) == 0
        rec = json.loads((out / "evaluation.json").read_text())
        assert rec["step"] == 40 and -4.0 <= rec["total_reward_mean"] <= 20.0
        assert "total_reward_mean" in json.loads(capsys.readouterr().out)

    def test_probe_quantiles(self, trained_run, tmp_path):
        out = tmp_path / "pq"
        assert main(["probe-quantiles", "--run", str(trained_run[0]), "--points", "9",
                     "--out", str(out)]) == 0
        rows = _rows(out / "quantiles.csv")
        assert rows[0] == ["tau"] + [f"actor_{i}" for i in range(5)]
        assert len(rows) == 10 and float(rows[1][0]) == 0.01 and float(rows[-1][0]) == 0.99

    def test_probe_rejects_scalar_critic(self, tiny_config, tmp_path):
        run = tmp_path / "det"
        assert main(["ablate", "--config", tiny_config, "--ablation", "det-critic",
                     "--out", str(run)]) == 0
        assert main(["probe-quantiles", "--run", str(run), "--out", str(tmp_path / "p")]) == 2

    def test_dump_actions(self, trained_run, tmp_path):
        out = tmp_path / "da"
        assert main(["dump-actions", "--run", str(trained_run[0]), "--out", str(out)]) == 0
        rows = _rows(out / "actions.csv")
        assert rows[0] == ["actor_id", "user_id", "a_0", "a_1", "a_2", "a_3"]
        assert len(rows) == 1 + 5 * 20

    def test_gen_data(self, tmp_path):
        out = tmp_path / "data"
        assert main(["gen-data", "--set", "num_users=12", "--set", "num_items=9",
                     "--set", "dim=3", "--out", str(out)]) == 0
        users, catalog = load_population(out / "population.bin")
        assert len(users) == 12 and catalog.embeddings.shape == (9, 3)

    def test_train_from_population_file(self, tiny_config, tmp_path):
        data = tmp_path / "data"
        assert main(["gen-data", "--config", tiny_config, "--out", str(data)]) == 0
        out = tmp_path / "run"
        assert main(["train", "--config", tiny_config, "--set",
                     f"population_file={data / 'population.bin'}", "--out", str(out)]) == 0

    def test_train_from_interaction_log(self, tiny_config, tmp_path):
        r = np.random.default_rng(0)
        log = tmp_path / "log.csv"
        write_interaction_log(log, r.integers(0, 15, 400), r.integers(0, 25, 400),
                              r.integers(0, 2, 400), np.arange(400.0))
        assert main(["train", "--config", tiny_config, "--env", f"csv:{log}",
                     "--out", str(tmp_path / "o")]) == 0

    def test_cli_flags_override_config(self, tiny_config, tmp_path):
        out = tmp_path / "o"
        assert main(["train", "--config", tiny_config, "--m", "2", "--lambda", "4",
                     "--steps", "20", "--out", str(out)]) == 0
        cfg = parse_config_text((out / "config.txt").read_text())
        assert cfg["m"] == 2 and cfg["lam"] == 4.0 and cfg["total_steps"] == 20
        assert _rows(out / "curves.csv")[0] == ["step", "actor_0", "actor_1"]
