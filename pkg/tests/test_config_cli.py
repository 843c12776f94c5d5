"""Configuration schema and the command-line surface."""
import json

import pytest

from contrastlab.cli import main
from contrastlab.config import ConfigError, load_config, resolve_config
from contrastlab.augment import SyntheticSpec, generate_dataset, write_dataset


class TestResolve:
    def test_empty_document_gets_full_defaults(self):
        resolved = resolve_config({})
        assert resolved["model"] == {"d": 32, "d_prime": 16, "heads": 3}
        assert resolved["loss"]["temp_mode"] == "adaptive"
        assert resolved["loss"]["bounds"] == {"eta": 1e-5, "iota": 2.0}
        assert resolved["train"]["epochs"] == 60
        assert resolved["io"]["dataset"] is None

    def test_unknown_key_rejected_with_path(self):
        with pytest.raises(ConfigError, match="loss.gamma"):
            resolve_config({"loss": {"gamma": 1.0}})
        with pytest.raises(ConfigError, match="quux"):
            resolve_config({"quux": {}})

    def test_kappa_constraint_names_path(self):
        with pytest.raises(ConfigError, match="loss.kappa"):
            resolve_config({"loss": {"kappa": 0}})

    def test_kappa_vs_batch_negatives(self):
        with pytest.raises(ConfigError, match="loss.kappa"):
            resolve_config({"loss": {"kappa": 500, "neg_agg": "topk"},
                            "train": {"batch_size": 8}})

    def test_bounds_flow_into_loss_config(self, tmp_path):
        doc = {"loss": {"bounds": {"eta": 1e-5, "iota": 2.0}},
               "io": {"output_dir": str(tmp_path / "out")}}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        exp, resolved = load_config(path)
        assert exp.loss.bounds.eta == 1e-5
        assert exp.loss.bounds.iota == 2.0

    def test_type_errors_name_path(self):
        with pytest.raises(ConfigError, match="train.epochs"):
            resolve_config({"train": {"epochs": "sixty"}})
        with pytest.raises(ConfigError, match="loss.variant"):
            resolve_config({"loss": {"variant": "tripletloss"}})

    def test_baseline_family_constraints(self):
        with pytest.raises(ConfigError, match="model.heads"):
            resolve_config({"loss": {"family": "baseline"}, "model": {"heads": 3}})
        with pytest.raises(ConfigError, match="loss.temp_mode"):
            resolve_config({"loss": {"family": "baseline", "temp_mode": "adaptive"},
                            "model": {"heads": 1}})

    def test_resolved_echo_written(self, tmp_path):
        out = tmp_path / "runout"
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"io": {"output_dir": str(out)}}))
        _, resolved = load_config(path)
        echoed = json.loads((out / "config.resolved.json").read_text())
        assert echoed == resolved


@pytest.fixture(scope="module")
def small_config(tmp_path_factory):
    """A tiny end-to-end config plus its synthetic dataset on disk."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    write_dataset(generate_dataset(SyntheticSpec(classes=2, per_class=12, size=8,
                                                 channels=1, seed=4)), data_dir)
    doc = {
        "model": {"d": 16, "d_prime": 8, "heads": 2},
        "loss": {"beta": 2.0},
        "augment": {"prefix": 2},
        "train": {"epochs": 2, "batch_size": 8, "run_seed": 6, "probe_per_class": 5,
                  "temp_lr_scale": 0.01},
        "eval": {"knn_k": 3, "pair_count": 12, "probe_sizes": [2, 5]},
        "io": {"dataset": str(data_dir), "output_dir": str(root / "out")},
    }
    cfg_path = root / "experiment.json"
    cfg_path.write_text(json.dumps(doc))
    return root, cfg_path


class TestCommands:
    def test_pretrain_then_eval_commands(self, small_config):
        root, cfg_path = small_config
        assert main(["pretrain", "-c", str(cfg_path)]) == 0
        out = root / "out"
        assert (out / "checkpoint.bin").exists()
        assert (out / "train_log.csv").exists()
        assert (out / "config.resolved.json").exists()
        assert main(["knn", "-c", str(cfg_path)]) == 0
        assert main(["probe", "-c", str(cfg_path)]) == 0
        assert main(["analyze", "-c", str(cfg_path)]) == 0
        sep = (out / "separability.csv").read_text().splitlines()
        assert sep[0] == "source,bin_lo,bin_hi,pos_mass,neg_mass"
        eval_rows = (out / "eval_log.csv").read_text().splitlines()
        assert eval_rows[0] == "epoch,knn_acc,probe_acc,overlap"
        # pretrain final row + knn row + two probe rows
        assert len(eval_rows) == 1 + 1 + 1 + 2

    def test_pretrain_reruns_bit_identical(self, small_config, tmp_path):
        root, cfg_path = small_config
        out = root / "out"
        main(["pretrain", "-c", str(cfg_path)])
        first = (out / "train_log.csv").read_bytes()
        main(["pretrain", "-c", str(cfg_path)])
        assert (out / "train_log.csv").read_bytes() == first

    def test_missing_dataset_exit_code_names_field(self, tmp_path, capsys):
        doc = {"io": {"dataset": str(tmp_path / "nope"), "output_dir": str(tmp_path / "o")}}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        assert main(["pretrain", "-c", str(path)]) == 3
        assert "io.dataset" in capsys.readouterr().err

    def test_bad_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"loss": {"kappa": 0}}))
        assert main(["pretrain", "-c", str(path)]) == 2
        assert "loss.kappa" in capsys.readouterr().err

    def test_gen_data_round_trip(self, tmp_path):
        target = tmp_path / "generated"
        doc = {"io": {"dataset": str(target), "output_dir": str(tmp_path / "o"),
                      "synthetic": {"classes": 2, "per_class": 3, "size": 8, "channels": 1}}}
        path = tmp_path / "c.json"
        path.write_text(json.dumps(doc))
        assert main(["gen-data", "-c", str(path)]) == 0
        assert (target / "labels.csv").exists()
        assert len(list(target.glob("*.pgm"))) == 6

    def test_gen_data_requires_target(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"io": {"output_dir": str(tmp_path / "o")}}))
        assert main(["gen-data", "-c", str(path)]) == 2
        assert "io.dataset" in capsys.readouterr().err

    def test_knn_without_checkpoint_is_io_error(self, tmp_path, capsys):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"io": {"output_dir": str(tmp_path / "empty")},
                                    "train": {"epochs": 1}}))
        assert main(["knn", "-c", str(path)]) == 3
        assert "checkpoint" in capsys.readouterr().err
