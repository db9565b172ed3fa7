import numpy as np
import pytest

from fedtabgan import data
from fedtabgan.data import (CodeDictionary, PatientMatrix, SourceParams, binarize,
                            describe_patient, encode_pm1, load_matrix, save_matrix,
                            synth_source)
from fedtabgan.errors import ConfigError, ParseError, UsageError


def random_matrix(rng, rows, cols, p=0.3, labels=True):
    bits = (rng.random((rows, cols)) < p).astype(np.uint8)
    names = tuple(f"c{j}" for j in range(cols)) if labels else None
    return PatientMatrix(bits, names)


class TestPatientMatrix:
    def test_rejects_non_binary(self):
        with pytest.raises(ConfigError):
            PatientMatrix(np.array([[0, 2]]))

    def test_rejects_label_mismatch(self):
        with pytest.raises(ConfigError):
            PatientMatrix(np.zeros((1, 3), dtype=np.uint8), ("a", "b"))

    def test_immutable(self):
        m = PatientMatrix(np.zeros((2, 2), dtype=np.uint8))
        with pytest.raises(ValueError):
            m.bits[0, 0] = 1


class TestCsvRoundTrip:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        m = random_matrix(rng, 17, 9)
        p = tmp_path / "m.csv"
        save_matrix(m, p)
        assert load_matrix(p) == m

    def test_round_trip_no_rows(self, tmp_path):
        m = PatientMatrix(np.zeros((0, 4), dtype=np.uint8), ("a", "b", "c", "d"))
        p = tmp_path / "empty_rows.csv"
        save_matrix(m, p)
        loaded = load_matrix(p)
        assert loaded.rows == 0 and loaded.cols == 4
        assert loaded.feature_labels == ("a", "b", "c", "d")

    def test_figure_style_fixture(self, tmp_path):
        p = tmp_path / "f.csv"
        p.write_text("0389,51881\n1,0\n")
        m = load_matrix(p)
        assert m.rows == 1 and m.cols == 2
        assert m.feature_labels == ("0389", "51881")
        assert m.bits[0].tolist() == [1, 0]

    def test_non_binary_cell_location(self, tmp_path):
        lines = ["a,b,c"]
        for i in range(1, 7):
            row = ["0", "0", "0"]
            if i == 5:
                row[2] = "2"
            lines.append(",".join(row))
        p = tmp_path / "bad.csv"
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError, match=r"row 5, column 3"):
            load_matrix(p)

    def test_ragged_row(self, tmp_path):
        p = tmp_path / "ragged.csv"
        p.write_text("a,b\n0,1\n0\n")
        with pytest.raises(ParseError, match="row 2"):
            load_matrix(p)

    def test_empty_file(self, tmp_path):
        p = tmp_path / "none.csv"
        p.write_text("")
        with pytest.raises(ParseError):
            load_matrix(p)

    def test_crlf_accepted(self, tmp_path):
        p = tmp_path / "crlf.csv"
        p.write_bytes(b"x,y\r\n1,0\r\n")
        m = load_matrix(p)
        assert m.bits[0].tolist() == [1, 0]


class TestEncoding:
    def test_zero_row_maps_to_minus_one(self):
        m = PatientMatrix(np.zeros((1, 4), dtype=np.uint8))
        assert np.all(encode_pm1(m) == -1.0)

    def test_binarize_threshold(self):
        m = binarize(np.array([[0.0001, -0.0001, 0.0]]))
        assert m.bits[0].tolist() == [1, 0, 0]

    def test_composition_identity(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            m = random_matrix(rng, rng.integers(1, 20), rng.integers(1, 20))
            assert binarize(encode_pm1(m), feature_labels=m.feature_labels) == m


class TestSynthSource:
    def test_deterministic(self):
        params = SourceParams(n_patients=100, n_features=30, seed=11)
        assert synth_source(params, 0) == synth_source(params, 0)

    def test_sparsity_calibration(self):
        params = SourceParams(n_patients=5000, n_features=80,
                              sparsity_target=0.02, seed=3)
        m = synth_source(params, 0)
        frac = m.bits.mean()
        assert 0.018 <= frac <= 0.022

    def test_zero_shift_silos_match_within_noise(self):
        n = 4000
        params = SourceParams(n_patients=n, n_features=60, sparsity_target=0.05,
                              silo_shift=0.0, seed=9)
        p0 = synth_source(params, 0).bits.mean(axis=0)
        p1 = synth_source(params, 1).bits.mean(axis=0)
        rmse = np.sqrt(np.mean((p0 - p1) ** 2))
        pbar = 0.05
        assert rmse < 3.0 * np.sqrt(pbar * (1 - pbar) / n)

    def test_shift_monotone_in_expectation(self):
        shifts = [0.0, 0.5, 1.5]
        means = []
        for shift in shifts:
            rmses = []
            for seed in range(20):
                params = SourceParams(n_patients=400, n_features=40,
                                      sparsity_target=0.05, silo_shift=shift,
                                      seed=seed)
                p0 = synth_source(params, 0).bits.mean(axis=0)
                p1 = synth_source(params, 1).bits.mean(axis=0)
                rmses.append(np.sqrt(np.mean((p0 - p1) ** 2)))
            means.append(np.mean(rmses))
        assert means[0] <= means[1] <= means[2]

    def test_bad_params(self):
        with pytest.raises(ConfigError):
            SourceParams(n_patients=0, n_features=5)
        with pytest.raises(ConfigError):
            SourceParams(n_patients=5, n_features=5, sparsity_target=1.5)


class TestDescribePatient:
    def make_dict(self):
        return CodeDictionary({"0389": "Septicemia NOS", "51881": "Acute respiratry failure"})

    def test_all_zero_row(self):
        m = PatientMatrix(np.zeros((1, 2), dtype=np.uint8), ("0389", "51881"))
        assert describe_patient(m, 0, self.make_dict()) == []

    def test_mapped_code(self):
        m = PatientMatrix(np.array([[1, 0]], dtype=np.uint8), ("0389", "51881"))
        assert describe_patient(m, 0, self.make_dict()) == ["Septicemia NOS"]

    def test_unmapped_code_falls_back(self):
        m = PatientMatrix(np.array([[1]], dtype=np.uint8), ("9999",))
        assert describe_patient(m, 0, self.make_dict()) == ["9999"]

    def test_row_out_of_range(self):
        m = PatientMatrix(np.zeros((1, 1), dtype=np.uint8))
        with pytest.raises(UsageError):
            describe_patient(m, 3, self.make_dict())


class TestCodeDictionary:
    def test_load(self, tmp_path):
        p = tmp_path / "codes.csv"
        p.write_text('0389,Septicemia NOS\n51881,"Failure, acute"\n')
        d = CodeDictionary.load(p)
        assert d.describe("51881") == "Failure, acute"

    def test_duplicate_rejected(self, tmp_path):
        p = tmp_path / "codes.csv"
        p.write_text("a,one\na,two\n")
        with pytest.raises(ParseError, match="duplicate"):
            CodeDictionary.load(p)
