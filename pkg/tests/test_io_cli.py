import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose

import sqar.io as sio
from sqar import DimensionMismatch, ParseError, QuantileGrid, fit_rq, tune
from sqar.cli import main, parse_taus
from sqar.simulate import SimDesign, generate

from conftest import make_sqar_data


def _write(path, text):
    path.write_text(text)
    return str(path)


def _dataset_files(tmp_path, m1=6, m2=4, seed=0):
    data = make_sqar_data(m1=m1, m2=m2, seed=seed)
    data_path = tmp_path / "data.csv"
    weights_path = tmp_path / "weights.csv"
    sio.write_dataset_csv(str(data_path), data)
    sio.write_dense_weights_csv(str(weights_path), data.weights)
    return data, str(data_path), str(weights_path)


class TestParseTaus:
    def test_range_form(self):
        taus = parse_taus("0.1:0.9:0.1")
        assert len(taus) == 9
        assert taus[0] == pytest.approx(0.1)
        assert taus[-1] == pytest.approx(0.9)

    def test_list_form(self):
        assert parse_taus("0.25,0.5,0.75") == (0.25, 0.5, 0.75)

    def test_bad_spec(self):
        with pytest.raises(ParseError):
            parse_taus("0.1:0.9")
        with pytest.raises(ParseError):
            parse_taus("a,b")


class TestLoadDataset:
    def test_dense_round_trip(self, tmp_path):
        data, data_path, weights_path = _dataset_files(tmp_path)
        loaded = sio.load_dataset(data_path, weights_path, "dense_csv")
        assert loaded.n == data.n
        assert np.array_equal(loaded.y, data.y)
        assert np.array_equal(loaded.x, data.x)
        assert np.array_equal(loaded.weights.values, data.weights.values)

    def test_small_dense_file(self, tmp_path):
        data_path = _write(tmp_path / "d.csv", "y,x_1\n1,0.1\n2,0.5\n3,0.9\n4,0.3\n")
        w = "\n".join(["0,1,0,0", "1,0,0,0", "0,0,0,1", "0,0,1,0"]) + "\n"
        weights_path = _write(tmp_path / "w.csv", w)
        loaded = sio.load_dataset(data_path, weights_path, "dense_csv")
        assert loaded.n == 4
        assert loaded.weights.row_normalized

    def test_triplet_with_zero_rows_warns(self, tmp_path, capsys):
        data_path = _write(tmp_path / "d.csv", "y,x_1\n1,0.1\n2,0.5\n3,0.9\n4,0.3\n")
        weights_path = _write(tmp_path / "w.csv", "i,j,w\n0,1,1.0\n")
        loaded = sio.load_dataset(data_path, weights_path, "triplet_csv")
        err = capsys.readouterr().err
        assert "all zero" in err
        assert_allclose(loaded.weights.values[0, 1], 1.0)
        assert np.all(loaded.weights.values[1:] == 0.0)

    def test_dimension_mismatch(self, tmp_path):
        data_path = _write(tmp_path / "d.csv", "y,x_1\n1,0.1\n2,0.5\n3,0.9\n4,0.3\n")
        w = "\n".join(["0,1,0,0,0"] * 5).replace("0,1,0,0,0", "0,1,0,0,0")
        weights_path = _write(tmp_path / "w.csv", "\n".join(["0,1,0,0,0", "1,0,0,0,0",
                                                             "0,0,0,1,0", "0,0,1,0,0",
                                                             "0,0,0,0,0"]) + "\n")
        with pytest.raises(DimensionMismatch):
            sio.load_dataset(data_path, weights_path, "dense_csv")

    def test_header_must_start_with_y(self, tmp_path):
        data_path = _write(tmp_path / "d.csv", "resp,x_1\n1,0.1\n")
        weights_path = _write(tmp_path / "w.csv", "0\n")
        with pytest.raises(ParseError, match="named 'y'"):
            sio.load_dataset(data_path, weights_path, "dense_csv")

    def test_bad_cell_reports_location(self, tmp_path):
        data_path = _write(tmp_path / "d.csv", "y,x_1\n1,0.1\n2,oops\n3,0.9\n4,0.3\n")
        weights_path = _write(tmp_path / "w.csv", "0\n")
        with pytest.raises(ParseError, match="row 3, column 2"):
            sio.load_dataset(data_path, weights_path, "dense_csv")

    def test_normalization_warns_and_can_be_disabled(self, tmp_path, capsys):
        data_path = _write(tmp_path / "d.csv", "y,x_1\n1,0.1\n2,0.5\n3,0.9\n4,0.3\n")
        weights_path = _write(tmp_path / "w.csv", "\n".join(["0,2,0,0", "3,0,0,0",
                                                             "0,0,0,1", "0,0,1,0"]) + "\n")
        loaded = sio.load_dataset(data_path, weights_path, "dense_csv")
        assert "row-normalized" in capsys.readouterr().err
        assert_allclose(loaded.weights.values[0, 1], 1.0)
        raw = sio.load_dataset(data_path, weights_path, "dense_csv", normalize=False)
        assert raw.weights.values[0, 1] == 2.0
        assert not raw.weights.row_normalized


class TestResultJson:
    def test_round_trip_exact(self, tmp_path):
        data = make_sqar_data(m1=6, m2=4, seed=2)
        grid = QuantileGrid([0.25, 0.5, 0.75])
        result = tune(data, grid, "FAL", "BIC", grid_size=6)
        path = str(tmp_path / "result.json")
        sio.write_result_json(path, result, grid.taus)
        loaded, taus = sio.read_result_json(path)
        assert loaded.method == result.method
        assert loaded.chosen_t == result.chosen_t
        assert np.array_equal(loaded.sheet.alpha, result.sheet.alpha)
        assert np.array_equal(loaded.sheet.lam, result.sheet.lam)
        assert np.array_equal(loaded.sheet.beta, result.sheet.beta)
        assert np.array_equal(loaded.sheet.sigma2, result.sheet.sigma2)
        assert np.array_equal(loaded.fused_mask, result.fused_mask)
        assert np.array_equal(loaded.trace.grid, result.trace.grid)
        assert np.array_equal(loaded.trace.loss, result.trace.loss)
        assert np.array_equal(loaded.trace.edf, result.trace.edf)
        assert np.array_equal(taus, grid.taus)

    def test_schema_checked(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"schema": "other/9"}))
        with pytest.raises(ParseError, match="schema"):
            sio.read_result_json(str(path))


class TestDatasetRoundTripFits:
    def test_written_and_reloaded_dataset_fits_identically(self, tmp_path):
        design = SimDesign(example=1, m1=6, m2=4, lam=0.3, taus=(0.3, 0.5, 0.7),
                           reps=2, seed=8)
        data, _ = generate(design, 0)
        sio.write_dataset_csv(str(tmp_path / "d.csv"), data)
        sio.write_dense_weights_csv(str(tmp_path / "w.csv"), data.weights)
        loaded = sio.load_dataset(str(tmp_path / "d.csv"), str(tmp_path / "w.csv"), "dense_csv")
        grid = design.grid
        fit_a = fit_rq(data, grid)
        fit_b = fit_rq(loaded, grid)
        assert np.array_equal(fit_a.sheet.alpha, fit_b.sheet.alpha)
        assert np.array_equal(fit_a.sheet.lam, fit_b.sheet.lam)
        assert np.array_equal(fit_a.sheet.beta, fit_b.sheet.beta)


class TestFitCommand:
    def test_rq_fit_writes_nine_rows(self, tmp_path):
        _, data_path, weights_path = _dataset_files(tmp_path, m1=10)
        out = tmp_path / "out"
        code = main(["fit", "--data", data_path, "--weights", weights_path,
                     "--method", "rq", "--out", str(out)])
        assert code == 0
        lines = (out / "coefficients.csv").read_text().strip().splitlines()
        assert len(lines) == 10  # header + 9 quantiles
        assert lines[0] == "tau,alpha,lambda,beta_1,sigma2"
        doc = json.loads((out / "result.json").read_text())
        assert doc["schema"] == "sqar-result/1"
        assert doc["method"] == "RQ"

    def test_fal_with_zero_budget_masks_everything(self, tmp_path):
        _, data_path, weights_path = _dataset_files(tmp_path)
        out = tmp_path / "out"
        code = main(["fit", "--data", data_path, "--weights", weights_path,
                     "--method", "fal", "--taus", "0.25,0.5,0.75", "--t", "0",
                     "--out", str(out)])
        assert code == 0
        lines = (out / "fused_mask.csv").read_text().strip().splitlines()[1:]
        assert len(lines) == 2
        for line in lines:
            assert line.split(",")[2:] == ["true", "true"]

    def test_tune_records_chosen_t_in_range(self, tmp_path):
        _, data_path, weights_path = _dataset_files(tmp_path)
        out = tmp_path / "out"
        code = main(["tune", "--data", data_path, "--weights", weights_path,
                     "--method", "fal", "--taus", "0.25,0.5,0.75",
                     "--grid-size", "8", "--out", str(out)])
        assert code == 0
        doc = json.loads((out / "result.json").read_text())
        assert 0.0 <= doc["chosen_t"] <= (3 - 1) * (1 + 1)
        trace_lines = (out / "tuning_trace.csv").read_text().strip().splitlines()
        assert len(trace_lines) == 9  # header + grid points

    def test_sar2sls_single_row(self, tmp_path):
        _, data_path, weights_path = _dataset_files(tmp_path)
        out = tmp_path / "out"
        code = main(["fit", "--data", data_path, "--weights", weights_path,
                     "--method", "sar2sls", "--out", str(out)])
        assert code == 0
        lines = (out / "coefficients.csv").read_text().strip().splitlines()
        assert len(lines) == 2
        assert lines[1].startswith(",")  # no tau for the mean model

    def test_missing_file_exits_2(self, tmp_path):
        code = main(["fit", "--data", str(tmp_path / "nope.csv"), "--weights",
                     str(tmp_path / "nope_w.csv"), "--method", "rq", "--out", str(tmp_path)])
        assert code == 2

    def test_rank_deficient_exits_3(self, tmp_path):
        data_path = _write(tmp_path / "d.csv",
                           "y,x_1,x_2\n" + "".join(f"{i},{v},{v}\n" for i, v in
                                                   enumerate([0.1, 0.5, 0.9, 0.3, 0.7, 0.2, 0.8, 0.4])))
        w = np.zeros((8, 8))
        for blk in range(2):
            for i in range(4):
                for j in range(4):
                    if i != j:
                        w[4 * blk + i, 4 * blk + j] = 1 / 3
        weights_path = tmp_path / "w.csv"
        weights_path.write_text("\n".join(",".join(repr(float(v)) for v in row) for row in w) + "\n")
        code = main(["fit", "--data", data_path, "--weights", str(weights_path),
                     "--method", "sar2sls", "--out", str(tmp_path / "out")])
        assert code == 3

    def test_invalid_budget_exits_2(self, tmp_path):
        _, data_path, weights_path = _dataset_files(tmp_path)
        code = main(["fit", "--data", data_path, "--weights", weights_path,
                     "--method", "fal", "--taus", "0.25,0.5,0.75", "--t", "99",
                     "--out", str(tmp_path / "out")])
        assert code == 2


class TestSimulateCommand:
    @staticmethod
    def _study_config(tmp_path, **overrides):
        doc = dict(example=1, m1=6, m2=4, **{"lambda": 0.3}, b=0.5, c0=0.0, c1=0.0,
                   taus=[0.25, 0.5, 0.75], reps=2, seed=5, methods=["RQ"],
                   criterion="BIC")
        doc.update(overrides)
        path = tmp_path / "study.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def test_outputs_and_row_counts(self, tmp_path):
        config = self._study_config(tmp_path, methods=["RQ", "FL"])
        out = tmp_path / "out"
        assert main(["simulate", "--config", config, "--out", str(out)]) == 0
        medse = (out / "medse.csv").read_text().strip().splitlines()
        assert len(medse) == 1 + 3 * 2
        paths = (out / "coefficient_paths.csv").read_text().strip().splitlines()
        assert len(paths) == 1 + 2 * 3 * 3  # methods x taus x coefficients

    def test_byte_identical_rerun(self, tmp_path):
        config = self._study_config(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        assert main(["simulate", "--config", config, "--out", str(out1)]) == 0
        assert main(["simulate", "--config", config, "--out", str(out2)]) == 0
        assert (out1 / "medse.csv").read_bytes() == (out2 / "medse.csv").read_bytes()
        assert (out1 / "coefficient_paths.csv").read_bytes() == \
            (out2 / "coefficient_paths.csv").read_bytes()

    def test_example4_emits_beta2(self, tmp_path):
        config = self._study_config(tmp_path, example=4, alpha=0.0, b=0.0,
                                    beta=[2.0, 3.0], c2=0.0)
        out = tmp_path / "out"
        assert main(["simulate", "--config", config, "--out", str(out)]) == 0
        text = (out / "coefficient_paths.csv").read_text()
        assert ",beta_2," in text

    def test_missing_key_exits_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"example": 1}))
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == 2

    def test_bad_json_exits_2(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        assert main(["simulate", "--config", str(path), "--out", str(tmp_path)]) == 2


class TestConsoleScript:
    def test_entry_point_runs(self, tmp_path):
        import shutil
        import subprocess

        exe = shutil.which("sqar")
        if exe is None:
            pytest.skip("console script not on PATH")
        proc = subprocess.run([exe, "fit", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        assert "--weights" in proc.stdout
