"""Model assembly, the training protocol, metrics and the sweep."""

import json

import numpy as np
import pytest

from aggnet.experiment import (
    ExperimentConfig,
    TrainingDiverged,
    build_model,
    evaluate,
    load_datasets,
    param_summary,
    robustness_score,
    sweep,
    train,
)
from aggnet.gradcheck import check_full_model
from aggnet.model import aggregation_layer


def tiny_config(**kw):
    base = dict(
        arch="mlp", aggregation="baseline", data="synthetic",
        proj_dim=8, hidden_dim=8, batch_size=32, max_epochs=2, seed=0,
        synthetic_train=120, synthetic_val=40, synthetic_test=40,
    )
    base.update(kw)
    return ExperimentConfig(**base)


class TestBuildModel:
    def test_baseline_mlp_parameter_count(self):
        """Arithmetic oracle: 3072*128+128 + 128*128+128 + 128*10+10."""
        expected = 3072 * 128 + 128 + 128 * 128 + 128 + 128 * 10 + 10
        assert expected == 411_146
        cfg = ExperimentConfig(arch="mlp", aggregation="baseline")
        assert build_model(cfg).param_count() == expected

    def test_fmean_hybrid_adds_exactly_256_novel_parameters(self):
        """128 p entries plus 128 alpha_raw entries over the baseline."""
        base = build_model(ExperimentConfig(arch="mlp", aggregation="baseline"))
        hyb = build_model(ExperimentConfig(arch="mlp", aggregation="fmean-hybrid"))
        assert hyb.param_count() - base.param_count() == 256

    def test_threeway_has_five_novel_parameters_per_unit(self):
        """Per unit: p, log_sigma and three alpha_raw entries."""
        model = build_model(tiny_config(aggregation="threeway-hybrid", hidden_dim=8))
        novel = sum(p.data.size for p in model.parameters() if p.tag == "novel")
        assert novel == 5 * 8

    def test_cnn_flatten_width(self):
        from aggnet.model import CNN_FLAT

        assert CNN_FLAT == 8192

    def test_cnn_composes_at_native_resolution(self):
        """One forward/backward step through the full conv stack: the
        extractor must hand exactly 8192 features to the projection."""
        from aggnet.layers import softmax_xent

        cfg = ExperimentConfig(arch="cnn", aggregation="threeway-hybrid",
                               proj_dim=16, hidden_dim=16)
        model = build_model(cfg)
        x = np.random.default_rng(0).random((2, 3, 32, 32))
        logits = model.forward(x, train=True)
        assert logits.shape == (2, 10)
        _, dlogits = softmax_xent(logits, np.array([1, 7]))
        dx = model.backward(dlogits)
        assert dx.shape == x.shape
        assert all(p.grad is not None for p in model.parameters())

    def test_invalid_names_rejected(self):
        with pytest.raises(ValueError):
            ExperimentConfig(arch="rnn")
        with pytest.raises(ValueError):
            ExperimentConfig(aggregation="median")
        with pytest.raises(ValueError):
            ExperimentConfig(proj_dim=0)

    def test_baseline_has_no_novel_group(self):
        model = build_model(tiny_config())
        assert all(p.tag == "standard" for p in model.parameters())

    def test_end_to_end_gradcheck_every_aggregation(self):
        """Tiny full models pass FD checks on every parameter at 1e-4."""
        assert check_full_model() < 1e-4


class TestTraining:
    def test_zero_learning_rate_freezes_parameters(self):
        cfg = tiny_config(lr_standard=0.0, lr_novel=0.0,
                          aggregation="fmean-hybrid", max_epochs=3)
        model = build_model(cfg)
        before = [p.data.copy() for p in model.parameters()]
        train(cfg, model=model, datasets=load_datasets(cfg))
        for b, p in zip(before, model.parameters()):
            np.testing.assert_array_equal(b, p.data)

    def test_one_epoch_reduces_loss(self):
        """A single epoch on separable blobs beats the initial loss."""
        cfg = tiny_config(max_epochs=1, synthetic_train=240)
        datasets = load_datasets(cfg)
        model = build_model(cfg)
        from aggnet.experiment import validation_loss

        initial, _ = validation_loss(model, datasets[0], cfg.arch)
        report = train(cfg, model=model, datasets=datasets)
        assert report.epochs[0]["train_loss"] < initial

    def test_flat_validation_stops_at_epoch_eleven(self):
        """Frozen parameters give a flat metric; patience 10 stops at 11."""
        cfg = tiny_config(lr_standard=0.0, lr_novel=0.0, max_epochs=40)
        report = train(cfg)
        assert report.stopped_early
        assert len(report.epochs) == 11

    def test_divergence_aborts_with_diagnostics(self):
        cfg = tiny_config()
        model = build_model(cfg)
        model.parameters()[0].data[0, 0] = np.nan
        with pytest.raises(TrainingDiverged) as err:
            train(cfg, model=model)
        assert err.value.epoch == 1
        assert err.value.batch_index == 0
        assert err.value.seed == cfg.seed

    def test_best_checkpoint_restored_for_final_eval(self):
        cfg = tiny_config(max_epochs=4, aggregation="fmean-hybrid")
        report = train(cfg)
        assert report.best_epoch is not None
        assert 1 <= report.best_epoch <= 4

    def test_learning_rates_logged_per_epoch(self):
        cfg = tiny_config(max_epochs=2)
        report = train(cfg)
        assert [row["lr_standard"] for row in report.epochs] == [1e-3, 1e-3]

    def test_outputs_written(self, tmp_path):
        cfg = tiny_config(max_epochs=1)
        train(cfg, out_dir=tmp_path)
        assert (tmp_path / "report.json").exists()
        assert (tmp_path / "metrics.csv").exists()
        assert (tmp_path / "best.ckpt").exists()
        header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
        assert header.split(",") == [
            "epoch", "train_loss", "val_loss", "val_acc",
            "lr_standard", "lr_novel", "mean_p", "mean_sigma", "mean_alpha",
        ]


class TestBaselineEquivalence:
    def test_saturated_hybrid_tracks_baseline(self):
        """alpha_raw = -40 with frozen novel params reproduces the
        baseline loss trajectory step for step."""
        base_cfg = tiny_config(max_epochs=5)
        hyb_cfg = tiny_config(max_epochs=5, aggregation="fmean-hybrid", lr_novel=0.0)

        base_model = build_model(base_cfg)
        hyb_model = build_model(hyb_cfg)
        agg = aggregation_layer(hyb_model)
        agg.alpha_raw.data[:] = -40.0
        np.testing.assert_array_equal(agg.W.data,
                                      base_model.layers[2].W.data)

        datasets = load_datasets(base_cfg)
        base_rep = train(base_cfg, model=base_model, datasets=datasets)
        hyb_rep = train(hyb_cfg, model=hyb_model, datasets=datasets)
        for a, b in zip(base_rep.epochs, hyb_rep.epochs):
            assert abs(a["train_loss"] - b["train_loss"]) < 1e-6
            assert abs(a["val_loss"] - b["val_loss"]) < 1e-6


class TestLoadDatasets:
    def test_cifar_source_splits_train_val_test(self, tmp_path):
        from test_data import write_fake_batch

        for i in range(1, 6):
            write_fake_batch(tmp_path / f"data_batch_{i}.bin", 20, seed=i)
        write_fake_batch(tmp_path / "test_batch.bin", 10, seed=9)
        cfg = tiny_config(data="cifar10", data_dir=str(tmp_path), val_size=25)
        train_ds, val_ds, test_ds = load_datasets(cfg)
        assert len(train_ds) == 75 and len(val_ds) == 25 and len(test_ds) == 10

    def test_unknown_source_rejected(self):
        cfg = tiny_config()
        cfg.data = "mnist"
        with pytest.raises(ValueError):
            load_datasets(cfg)


class TestEvaluate:
    def test_constant_predictor_is_chance_level(self):
        cfg = tiny_config()
        model = build_model(cfg)
        head = model.layers[-1]
        head.W.data[:] = 0.0
        head.b.data[:] = 0.0
        head.b.data[3] = 10.0  # always predicts class 3
        _, _, test = load_datasets(cfg)
        acc = evaluate(model, test, cfg.arch)
        expected = float(np.mean(test.labels == 3))
        assert acc == pytest.approx(expected, abs=1e-12)
        assert abs(acc - 0.1) < 0.05  # balanced 10-class data

    def test_zero_sigma_noise_equals_clean(self):
        from aggnet.data import NoiseSpec

        cfg = tiny_config()
        model = build_model(cfg)
        _, _, test = load_datasets(cfg)
        clean = evaluate(model, test, cfg.arch)
        noisy = evaluate(model, test, cfg.arch, noise=NoiseSpec(sigma_noise=0.0, seed=3))
        assert clean == noisy

    def test_same_noise_seed_is_deterministic(self):
        from aggnet.data import NoiseSpec

        cfg = tiny_config()
        model = build_model(cfg)
        _, _, test = load_datasets(cfg)
        spec = NoiseSpec(sigma_noise=0.15, seed=7)
        assert evaluate(model, test, cfg.arch, noise=spec) == evaluate(
            model, test, cfg.arch, noise=spec
        )


class TestRobustnessScore:
    def test_published_cnn_ratio(self):
        """Accuracies 87.33 and 77.73 give 0.890."""
        assert robustness_score(87.33, 77.73) == pytest.approx(0.890, abs=0.0005)

    def test_published_mlp_ratio(self):
        """Accuracies 52.30 and 51.45 give 0.984."""
        assert robustness_score(52.30, 51.45) == pytest.approx(0.984, abs=0.0005)

    def test_equal_accuracies(self):
        assert robustness_score(0.42, 0.42) == 1.0

    def test_scale_consistency(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a, b, k = rng.uniform(0.01, 1.0, size=3)
            assert robustness_score(k * a, k * b) == pytest.approx(
                robustness_score(a, b), rel=1e-12
            )

    def test_zero_clean_rejected(self):
        with pytest.raises(ZeroDivisionError):
            robustness_score(0.0, 0.1)


class TestParamSummary:
    def test_fresh_fmean_hybrid(self):
        """New layers report mean p = 1.0 and mean blend = 0.5 exactly."""
        model = build_model(tiny_config(aggregation="fmean-hybrid"))
        s = param_summary(model)
        assert s["p"]["mean"] == 1.0
        assert s["alpha"]["mean"] == 0.5
        assert "sigma" not in s

    def test_fresh_threeway_blends(self):
        model = build_model(tiny_config(aggregation="threeway-hybrid"))
        s = param_summary(model)
        assert s["blend"]["linear"]["mean"] == pytest.approx(1 / 3, abs=1e-15)
        assert s["blend"]["fmean"]["mean"] == pytest.approx(1 / 3, abs=1e-15)
        assert s["blend"]["gaussian"]["mean"] == pytest.approx(1 / 3, abs=1e-15)
        assert s["alpha"]["mean"] == pytest.approx(2 / 3, abs=1e-15)
        assert s["sigma"]["mean"] == 1.0

    def test_baseline_summary_empty(self):
        assert param_summary(build_model(tiny_config())) == {}


class TestReportDeterminism:
    def test_two_runs_agree_number_for_number(self):
        """Config + seed fully determine the report (wall-clock aside)."""
        cfg = tiny_config(aggregation="gaussian-hybrid", max_epochs=2)
        a = train(cfg).to_dict()
        b = train(cfg).to_dict()
        a.pop("wall_clock_sec")
        b.pop("wall_clock_sec")
        assert a == b


class TestSweep:
    def test_four_aggregations_one_arch(self, tmp_path):
        matrix = {
            "archs": ["mlp"],
            "aggregations": ["baseline", "fmean-hybrid", "gaussian-hybrid",
                             "threeway-hybrid"],
            "seeds": [0],
            "data": "synthetic", "proj_dim": 8, "hidden_dim": 8,
            "batch_size": 32, "max_epochs": 1,
            "synthetic_train": 96, "synthetic_val": 32, "synthetic_test": 32,
        }
        rows = sweep(matrix, out_dir=tmp_path)
        assert len(rows) == 4
        assert all(r["status"] == "ok" for r in rows)
        assert all(r["clean_acc"] is not None for r in rows)
        baseline = rows[0]
        assert baseline["mean_p"] is None and baseline["mean_alpha"] is None
        threeway = rows[3]
        assert threeway["mean_p"] is not None and threeway["mean_sigma"] is not None
        assert (tmp_path / "sweep.csv").exists()
        saved = json.loads((tmp_path / "sweep.json").read_text())
        assert len(saved) == 4

    def test_sweep_deterministic(self):
        matrix = {
            "archs": ["mlp"], "aggregations": ["fmean-hybrid"], "seeds": [3],
            "data": "synthetic", "proj_dim": 8, "hidden_dim": 8,
            "batch_size": 32, "max_epochs": 1,
            "synthetic_train": 96, "synthetic_val": 32, "synthetic_test": 32,
        }
        a = sweep(matrix)
        b = sweep(matrix)
        assert a == b

    @pytest.mark.slow
    def test_eight_row_full_matrix(self, tmp_path):
        """4 aggregations x 2 architectures produce 8 result rows."""
        matrix = {
            "aggregations": ["baseline", "fmean-hybrid", "gaussian-hybrid",
                             "threeway-hybrid"],
            "seeds": [0],
            "data": "synthetic", "proj_dim": 8, "hidden_dim": 8,
            "batch_size": 32, "max_epochs": 1,
            "synthetic_train": 64, "synthetic_val": 32, "synthetic_test": 32,
        }
        rows = sweep(matrix, out_dir=tmp_path)
        assert len(rows) == 8
        assert {r["arch"] for r in rows} == {"mlp", "cnn"}
        assert all(r["status"] == "ok" for r in rows)

    def test_failed_run_recorded_and_sweep_continues(self):
        matrix = {
            "archs": ["mlp"], "aggregations": ["not-a-kind", "baseline"],
            "seeds": [0], "data": "synthetic", "proj_dim": 8, "hidden_dim": 8,
            "batch_size": 32, "max_epochs": 1,
            "synthetic_train": 96, "synthetic_val": 32, "synthetic_test": 32,
        }
        rows = sweep(matrix)
        assert rows[0]["status"].startswith("error:")
        assert rows[1]["status"] == "ok"


class TestCLI:
    def test_train_eval_round_trip(self, tmp_path, capsys):
        from aggnet.cli import main

        cfg = tiny_config(max_epochs=1).to_dict()
        cfg_path = tmp_path / "cfg.json"
        cfg_path.write_text(json.dumps(cfg))
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        assert main(["eval", "--checkpoint", str(out / "best.ckpt"),
                     "--noise-sigma", "0.15"]) == 0
        captured = capsys.readouterr().out
        assert "rho" in captured

    def test_gradcheck_verb(self, capsys):
        from aggnet.cli import main

        assert main(["gradcheck", "--module", "fmean", "--cases", "5"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_sweep_verb(self, tmp_path):
        from aggnet.cli import main

        matrix = {
            "archs": ["mlp"], "aggregations": ["baseline"], "seeds": [0],
            "data": "synthetic", "proj_dim": 8, "hidden_dim": 8,
            "batch_size": 32, "max_epochs": 1,
            "synthetic_train": 96, "synthetic_val": 32, "synthetic_test": 32,
        }
        mpath = tmp_path / "matrix.json"
        mpath.write_text(json.dumps(matrix))
        assert main(["sweep", "--matrix", str(mpath), "--out", str(tmp_path / "s")]) == 0
