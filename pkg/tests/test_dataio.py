import json
import math

import numpy as np
import pytest

from reghmm import dp
from reghmm.dataio import (Dataset, export_pwm, format_pwm, load_model, load_pbm_table,
                           model_to_dict, save_model, save_table, simulate)
from reghmm.errors import (EmptyDatasetError, InvalidArgumentError, ParseError, SchemaError,
                           ValidationError)
from reghmm.model import (HmmParams, Link, RegressionParams, StateSpace, SummarySpec,
                          default_initial, default_transitions, init_params, tie_emissions)


def _params(K=2, L=8, entry=0.1, seed=0):
    space = StateSpace(K)
    E = tie_emissions(np.random.default_rng(seed).dirichlet(np.ones(4) * 2, size=space.n_states))
    return HmmParams(space, E, default_transitions(L, entry), default_initial(space, entry))


def read_meme(text):
    """Minimal MEME reader: alphabet, motif name and the probability matrix."""
    lines = [ln.strip() for ln in text.splitlines()]
    assert lines[0].startswith("MEME version 4")
    alphabet = next(ln.split("=", 1)[1].strip() for ln in lines if ln.startswith("ALPHABET="))
    name = next(ln.split()[1] for ln in lines if ln.startswith("MOTIF"))
    start = next(i for i, ln in enumerate(lines) if ln.startswith("letter-probability matrix"))
    header = dict(tok.split("=") for tok in
                  lines[start].split(":", 1)[1].replace("= ", "=").split())
    w = int(header["w"])
    rows = [[float(x) for x in lines[start + 1 + k].split()] for k in range(w)]
    assert int(header["alength"]) == len(alphabet)
    return alphabet, name, np.array(rows)


class TestLoader:
    def test_three_rows(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("ACGT\t1.5\nacga\t2\nTTTT\t-0.5\n")
        ds = load_pbm_table(p)
        assert len(ds) == 3
        assert ds.sequences[1] == "ACGA"
        np.testing.assert_array_equal(ds.y, [1.5, 2.0, -0.5])

    def test_drops_non_acgt(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("ACGN 1.5\nACGT 2.0\n")
        ds = load_pbm_table(p)
        assert len(ds) == 1 and ds.dropped["non_acgt"] == 1

    def test_log_transform(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("sequence,intensity\nACGT,100.0\nACGA,0\nACGC,nan\n")
        ds = load_pbm_table(p, log_transform=True)
        assert ds.y[0] == pytest.approx(4.60517, abs=1e-5)
        assert ds.dropped == {"non_acgt": 0, "non_finite": 1, "non_positive": 1}
        assert ds.transform == "log"

    def test_truncation_keeps_first_bases(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("ACGTACGTAA\t1\nTTTTTTTTNN\t2\n")
        ds = load_pbm_table(p, truncate_to=8)
        assert ds.sequences == ["ACGTACGT", "TTTTTTTT"]

    def test_parse_error_names_line(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("ACGT\t1\nACGT\t1\textra\n")
        with pytest.raises(ParseError) as info:
            load_pbm_table(p)
        assert info.value.line == 2 and "line 2" in str(info.value)

    def test_bad_number_after_header(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("seq\tvalue\nACGT\tabc\n")
        with pytest.raises(ParseError):
            load_pbm_table(p)

    def test_empty(self, tmp_path):
        p = tmp_path / "t.tsv"
        p.write_text("seq\tvalue\nNNNN\t1\n")
        with pytest.raises(EmptyDatasetError):
            load_pbm_table(p)

    def test_reserialization_idempotent(self, tmp_path):
        p = tmp_path / "a.tsv"
        p.write_text("seq\tv\nacgt\t0.1\nACGN\t3\nGGCC,1e-3\n")
        once = tmp_path / "b.tsv"
        twice = tmp_path / "c.tsv"
        save_table(load_pbm_table(p), once)
        save_table(load_pbm_table(once), twice)
        assert once.read_bytes() == twice.read_bytes()

    def test_mixed_lengths_refuse_matrix(self):
        ds = Dataset(["ACG", "ACGT"], [1.0, 2.0])
        with pytest.raises(InvalidArgumentError):
            ds.X


class TestSimulate:
    def test_degenerate_generator(self):
        params = _params(entry=0.0)
        g = RegressionParams(Link.LINEAR, alpha=2.0, beta=0.0, sigma=1.5)
        ds = simulate(params, g, SummarySpec("all"), 4000, 7)
        assert np.all(ds.extras["summaries"] == 0)
        assert abs(ds.y.mean() - 2.0) <= 3 * 1.5 / math.sqrt(4000)

    def test_reproducible(self, tmp_path):
        params = _params()
        g = RegressionParams(Link.TANH, 1.0, 2.0, s=1.0, t=1.0)
        save_table(simulate(params, g, SummarySpec("entering"), 50, 11), tmp_path / "a")
        save_table(simulate(params, g, SummarySpec("entering"), 50, 11), tmp_path / "b")
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        save_table(simulate(params, g, SummarySpec("entering"), 50, 12), tmp_path / "c")
        assert (tmp_path / "a").read_bytes() != (tmp_path / "c").read_bytes()

    def test_paths_feasible(self):
        params = _params(K=3, L=9, entry=0.2)
        ds = simulate(params, RegressionParams(), SummarySpec("all"), 500, 1)
        Z = ds.extras["paths"]
        space = params.space
        for l in range(1, 9):
            moved = Z[:, l - 1] != 0
            succ = np.array([space.successor(z) for z in Z[moved, l - 1]])
            np.testing.assert_array_equal(Z[moved, l], succ)
        # a chain never runs past the end
        assert np.all(Z[:, -1] != 1) and np.all(Z[:, -1] != 4)

    def test_occupancy_matches_dp(self):
        params = _params(K=2, L=8, entry=0.15)
        n = 10000
        ds = simulate(params, RegressionParams(), SummarySpec("all"), n, 5)
        # with flat emissions the posterior occupancy is the prior occupancy
        flat = params.replace(emissions=np.full((5, 4), 0.25))
        exact = dp.forward_backward("A" * 8, flat).gamma
        Z = ds.extras["paths"]
        emp = np.stack([(Z == z).mean(axis=0) for z in range(5)], axis=1)
        se = np.sqrt(exact * (1 - exact) / n)
        assert np.all(np.abs(emp - exact) <= 3 * se + 1e-12)

    def test_summary_distribution(self):
        params = _params(K=2, L=10, entry=0.1)
        spec = SummarySpec("entering")
        ds = simulate(params, RegressionParams(), spec, 50000, 9)
        marg, _, _, _ = dp.marginal_batch(ds.X, params, spec)
        expected = marg.mean(axis=0)
        emp = np.bincount(ds.extras["summaries"], minlength=marg.shape[1]) / 50000
        assert 0.5 * np.abs(emp - expected).sum() <= 0.01

    def test_n_must_be_positive(self):
        with pytest.raises(InvalidArgumentError):
            simulate(_params(), RegressionParams(), SummarySpec("all"), 0, 1)


class TestModelFile:
    def _triple(self):
        params = _params(K=3, L=10, seed=4)
        tr = np.random.default_rng(2).dirichlet(np.ones(3), size=9)
        params = params.replace(transitions=tr)
        g = RegressionParams(Link.TANH, alpha=0.1, beta=-2.5, s=0.3, t=1.7, sigma=0.9)
        return params, g, SummarySpec("exiting")

    def test_round_trip(self, tmp_path):
        params, g, spec = self._triple()
        save_model(tmp_path / "m.json", params, g, spec)
        p2, g2, s2 = load_model(tmp_path / "m.json")
        np.testing.assert_array_equal(p2.emissions, params.emissions)
        np.testing.assert_array_equal(p2.transitions, params.transitions)
        assert g2 == g and s2.mode is spec.mode
        save_model(tmp_path / "m2.json", p2, g2, s2)
        assert (tmp_path / "m.json").read_bytes() == (tmp_path / "m2.json").read_bytes()

    def test_missing_field(self, tmp_path):
        doc = model_to_dict(*self._triple())
        del doc["sigma"]
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaError) as info:
            load_model(tmp_path / "m.json")
        assert info.value.field == "sigma" and "sigma" in str(info.value)

    def test_version_mismatch(self, tmp_path):
        doc = model_to_dict(*self._triple())
        doc["version"] = 99
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(SchemaError):
            load_model(tmp_path / "m.json")

    def test_k_mismatch(self, tmp_path):
        doc = model_to_dict(*self._triple())
        doc["K"] = 4
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(ValidationError):
            load_model(tmp_path / "m.json")

    def test_not_json(self, tmp_path):
        (tmp_path / "m.json").write_text("{nope")
        with pytest.raises(SchemaError):
            load_model(tmp_path / "m.json")


class TestPwm:
    def test_rows_and_round_trip(self, tmp_path):
        params = _params(K=5, L=12, seed=3)
        export_pwm(params, tmp_path / "m.meme", name="test")
        alphabet, name, M = read_meme((tmp_path / "m.meme").read_text())
        assert alphabet == "ACGT" and name == "test"
        assert M.shape == (5, 4)
        np.testing.assert_allclose(M.sum(axis=1), 1.0, atol=1e-6)
        sense = params.emissions[1:6]
        np.testing.assert_allclose(M, sense, atol=1e-6)

    def test_seeded_row(self):
        params = init_params(["ACGTAACGTA"], 5, dominance=0.7, kmer="ACGTA")
        _, _, M = read_meme(format_pwm(params))
        assert M[0, 0] == pytest.approx(0.7, abs=1e-6)

    def test_rows_print_exact_sums(self):
        params = _params(K=4, L=10, seed=8)
        text = format_pwm(params)
        start = text.splitlines().index(next(ln for ln in text.splitlines()
                                             if ln.startswith("letter-probability")))
        for line in text.splitlines()[start + 1:start + 5]:
            assert sum(int(tok.replace(".", "")) for tok in line.split()) == 1_000_000
