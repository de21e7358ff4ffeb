import csv
import json
import math

import pytest

from conftest import micro_config_dict, micro_experiment
from splitjscc.errors import ConfigError
from splitjscc.harness import (
    RESULTS_FILE,
    ExperimentConfig,
    emit,
    expand_grid,
    frontier_rows,
    load_config,
    run,
    sweep,
)
from splitjscc.results import CSV_COLUMNS, ResultRow, read_csv


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        d = micro_config_dict(tmp_path, seed=3, split=3)
        path.write_text(json.dumps(d))
        cfg, grid = load_config(path, {"seed": 5, "split": None})
        assert (cfg.seed, cfg.split, grid) == (5, 3, {})
        assert cfg.pipeline.seed == 5
        default, _ = load_config(None, {})
        assert default.seed == 0 and default.split == 2

    def test_nested_override(self, tmp_path):
        cfg, _ = load_config(None, {"pipeline": {"phase3": {"epochs": 2}}})
        assert cfg.pipeline.phase3.epochs == 2 and cfg.pipeline.phase3.lr == 0.1

    def test_unknown_field(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"splitt": 2}))
        with pytest.raises(ConfigError):
            load_config(path)

    def test_bad_json_and_missing(self, tmp_path):
        (tmp_path / "bad.json").write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "bad.json")
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")

    @pytest.mark.parametrize("kw", [dict(split=6), dict(pruning_ratio=1.0), dict(c_enc=-1), dict(snr_db_list=[])])
    def test_validation(self, tmp_path, kw):
        with pytest.raises(ConfigError):
            micro_experiment(tmp_path, **kw)

    def test_missing_dataset_path(self, tmp_path):
        cfg = micro_experiment(tmp_path, dataset={"kind": "cifar100", "path": str(tmp_path / "nowhere")})
        with pytest.raises(ConfigError):
            run(cfg)

    def test_hash_ignores_eval_only_fields(self, tmp_path):
        a = micro_experiment(tmp_path)
        b = micro_experiment(tmp_path / "x", snr_db_list=[-5.0])
        assert a.config_hash() == b.config_hash()
        assert a.config_hash() != micro_experiment(tmp_path, c_enc=3).config_hash()
        assert a.pretrain_hash() == micro_experiment(tmp_path, c_enc=3, split=4).pretrain_hash()

    def test_dict_round_trip_with_inf(self, tmp_path):
        cfg = micro_experiment(tmp_path, snr_db_list=[math.inf, 0.0])
        back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back.snr_db_list == [math.inf, 0.0] and back.config_hash() == cfg.config_hash()

    def test_grid_keys_checked(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"grid": {"lr": [1, 2]}}))
        with pytest.raises(ConfigError):
            load_config(path)


class TestRun:
    def test_four_snrs_four_rows(self, tmp_path):
        cfg = micro_experiment(tmp_path, snr_db_list=[-5.0, 0.0, 10.0, 20.0])
        rows = run(cfg)
        assert len(rows) == 4 and len(read_csv(tmp_path / "runs" / RESULTS_FILE)) == 4
        r = rows[0]
        assert r.bandwidth == 2 * 4 * 4 and r.c_enc == 2 and r.ratio == 0.25
        assert r.bandwidth_reduction == 3072 / r.bandwidth
        assert r.digital_bits > 0 and not math.isnan(r.split_accuracy)

    def test_noiseless_sanity_equals_baseline(self, tmp_path):
        cfg = micro_experiment(tmp_path, pruning_ratio=0.0, c_enc=0, snr_db_list=[math.inf])
        (row,) = run(cfg)
        assert row.accuracy == row.baseline_accuracy == row.split_accuracy
        assert row.bandwidth == 2 * 8 * 8

    def test_rerun_without_resume_replaces_rows(self, tmp_path):
        cfg = micro_experiment(tmp_path)
        run(cfg)
        run(cfg)
        assert len(read_csv(tmp_path / "runs" / RESULTS_FILE)) == 2

    def test_resume_equals_uninterrupted(self, tmp_path):
        ref = run(micro_experiment(tmp_path / "a"))

        class Stop(Exception):
            pass

        def stop_after_phase3(cfg, stage):
            if stage == "phase3":
                raise Stop

        cfg = micro_experiment(tmp_path / "b")
        with pytest.raises(Stop):
            run(cfg, on_phase=stop_after_phase3)
        resumed = run(cfg, resume=True)
        assert [r.to_csv_dict() for r in resumed] == [r.to_csv_dict() for r in ref]

    def test_until_stops_early(self, tmp_path):
        cfg = micro_experiment(tmp_path)
        assert run(cfg, until="phase2") == []
        names = sorted(p.name for p in (tmp_path / "runs" / "checkpoints").iterdir())
        assert names == sorted([f"{cfg.config_hash()}-phase2.ckpt", f"pretrain-{cfg.pretrain_hash()}.ckpt"])
        assert not (tmp_path / "runs" / RESULTS_FILE).exists()


class TestSweep:
    def test_two_by_two_grid_pretrains_once(self, tmp_path):
        base = micro_experiment(tmp_path, snr_db_list=[20.0])
        cells = expand_grid(base, {"split": [1, 2], "c_enc": [1, 2]})
        result = sweep(cells)
        assert not result.partial
        assert result.stats.pretrain_runs == 1
        assert len({r.config_hash for r in result.rows}) == 4 and len(result.rows) == 4

    def test_failing_cell_isolated(self, tmp_path):
        good = micro_experiment(tmp_path, snr_db_list=[20.0])
        bad = micro_experiment(tmp_path, snr_db_list=[20.0], pruning_ratio=0.9)  # infeasible on a 2-conv prefix
        result = sweep([bad, good])
        assert result.partial and [i for i, _, _ in result.failures] == [0]
        assert len(result.rows) == 1

    def test_interrupted_sweep_resumes_row_for_row(self, tmp_path):
        grid = {"pruning_ratio": [0.0, 0.25], "seed": [0, 1]}
        full = sweep(expand_grid(micro_experiment(tmp_path / "a"), grid))
        ref = (tmp_path / "a" / "runs" / RESULTS_FILE).read_text()

        calls = []

        def interrupt(cfg, stage):
            calls.append(stage)
            if len(calls) == 9:
                raise KeyboardInterrupt

        cells = expand_grid(micro_experiment(tmp_path / "b"), grid)
        with pytest.raises(KeyboardInterrupt):
            sweep(cells, on_phase=interrupt)
        resumed = sweep(cells, resume=True)
        assert not resumed.partial and len(full.rows) == 8
        assert (tmp_path / "b" / "runs" / RESULTS_FILE).read_text() == ref


def row(**kw):
    base = dict(split=2, ratio=0.0, c_enc=8, bandwidth=128, snr_db=20.0, accuracy=0.9, device_flops=100, baseline_accuracy=0.9, seed=0)
    base.update(kw)
    return ResultRow(**base)


class TestEmit:
    def test_csv_header(self, tmp_path):
        (path,) = emit([row()], tmp_path)
        header = path.read_text().splitlines()[0].split(",")
        assert header[: len(CSV_COLUMNS)] == "split,ratio,c_enc,bandwidth,snr_db,accuracy,device_flops,baseline_accuracy,seed".split(",")

    def test_empty_results_warn(self, tmp_path, caplog):
        (path,) = emit([], tmp_path)
        lines = path.read_text().splitlines()
        assert len(lines) == 1 and lines[0].startswith("split,ratio")
        assert "empty" in caplog.text.lower() or "no result" in caplog.text.lower()

    def test_json(self, tmp_path):
        (path,) = emit([row(snr_db=math.inf)], tmp_path, "json")
        data = json.loads(path.read_text())
        assert data[0]["split"] == 2

    def test_frontier_floor(self, tmp_path):
        rows = [row(accuracy=0.89, device_flops=10, bandwidth=64), row(accuracy=0.85, device_flops=5, bandwidth=8), row(device_flops=20, bandwidth=100)]
        _, fpath = emit(rows, tmp_path, frontier_floor=0.02)
        front = read_rows(fpath)
        assert [(int(r["x"]), int(r["y"])) for r in front] == [(10, 64)]
        assert front[0]["series"] == "snr=20dB"

    def test_frontier_series_per_snr(self):
        rows = [row(snr_db=s, device_flops=f) for s in (0.0, 20.0) for f in (1, 2)]
        assert sorted({r["series"] for r in frontier_rows(rows)}) == ["snr=0dB", "snr=20dB"]

    def test_bad_format(self, tmp_path):
        with pytest.raises(ConfigError):
            emit([], tmp_path, "xml")
