import json
import math

import numpy as np
import pytest

from sorql.cli import main
from sorql.harness.config import (
    PRESETS,
    SCHEMA_ID,
    ConfigError,
    MetricSpec,
    get_preset,
    model_w_star,
    parse_spec,
    spec_to_dict,
)
from sorql.harness.plot import emit_plot, render_svg
from sorql.harness.records import (
    RunRecord,
    aggregate,
    emit_csv,
    episodes_to_threshold,
    read_csv,
)
from sorql.harness.runner import run_experiment, run_one
from sorql.mdp import random_mdp, save_mdp, solve_fixed_point, sor_star


def base_doc(**changes):
    doc = {
        "schema": SCHEMA_ID,
        "name": "tiny",
        "env": "bandit39",
        "gamma": 0.99,
        "episodes": 50,
        "epsilon": 1.0,
        "seeds": [0, 1],
        "metrics": ["max_q"],
        "cadence": 10,
        "agents": [
            {"algorithm": "QL"},
            {"label": "DSORQL_star", "algorithm": "DSORQL", "w": "w_star_fraction: 1"},
        ],
    }
    doc.update(changes)
    return doc


def small(spec, **changes):
    """Shrink a preset to a few episodes and seeds."""
    defaults = {"episodes": min(spec.episodes, 30), "seeds": spec.seeds[:2],
                "cadence": min(spec.cadence, 10)}
    defaults.update(changes)
    return spec.replace(**defaults)


class TestConfig:
    @pytest.mark.parametrize("field,doc", [
        ("schema", base_doc(schema="other/1")),
        ("gamma", base_doc(gamma=1.0)),
        ("episodes", base_doc(episodes=-1)),
        ("seeds", base_doc(seeds=[])),
        ("seeds", base_doc(seeds=[1, 1])),
        ("env", base_doc(env="lunarlander")),
        ("metrics[0]", base_doc(metrics=["sharpe_ratio"])),
        ("metrics", base_doc(metrics=["left_action_probability"])),
        ("cadence", base_doc(cadence=0)),
        ("agents", base_doc(agents=[])),
        ("agents[0].algorithm", base_doc(agents=[{"algorithm": "SARSA"}])),
        ("agents[0].w", base_doc(agents=[{"algorithm": "SORQL", "w": "fixed: 500"}])),
        ("agents[0].w", base_doc(agents=[{"algorithm": "QL", "w": "fixed: 2"}])),
        ("agents[0].w", base_doc(agents=[{"algorithm": "MF_SORQL", "w": "fixed: 2"}])),
        ("agents[0].label", base_doc(agents=[{"algorithm": "QL", "label": "has space"}])),
        ("agents[0].schedule", base_doc(agents=[{"algorithm": "QL",
                                                  "schedule": {"kind": "polynomial", "exponent": 0.3}}])),
        ("agents", base_doc(agents=[{"algorithm": "QL"}, {"algorithm": "QL"}])),
        ("update_mode", base_doc(env="chain(8)", update_mode="synchronous")),
        ("epsilon", base_doc(epsilon=2.0)),
    ])
    def test_named_field_errors(self, field, doc):
        with pytest.raises(ConfigError) as info:
            parse_spec(doc)
        assert info.value.field == field

    def test_missing_field(self):
        doc = base_doc()
        del doc["gamma"]
        with pytest.raises(ConfigError, match="gamma"):
            parse_spec(doc)

    def test_allow_above_w_star(self):
        agent = {"algorithm": "SORQL", "w": "fixed: 500", "allow_above_w_star": True}
        assert parse_spec(base_doc(agents=[agent])).agents[0].allow_above_w_star

    def test_w_star_by_env(self):
        assert model_w_star("roulette", 0.95) == pytest.approx(20.0)
        assert model_w_star("bandit39", 0.99) == pytest.approx(100.0)
        assert model_w_star("chain(8)", 0.999) == pytest.approx(1.0)
        assert model_w_star("cartpole72", 0.999) is None

    def test_metric_parse(self):
        m = MetricSpec.parse("episodes_to_threshold(195,50)")
        assert (m.threshold, m.window) == (195.0, 50)
        assert m.tag == "episodes_to_threshold_195_50"
        assert MetricSpec.parse("rolling_mean_return(20)").tag == "rolling_mean_return_20"

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_presets_round_trip(self, name):
        spec = get_preset(name)
        assert parse_spec(json.loads(json.dumps(spec_to_dict(spec)))) == spec

    def test_preset_hyperparameters(self):
        roulette = get_preset("roulette")
        assert (roulette.gamma, roulette.episodes, len(roulette.seeds)) == (0.95, 100_000, 10)
        assert roulette.update_mode == "synchronous"
        bandit = get_preset("bandit39")
        assert (bandit.gamma, bandit.episodes, len(bandit.seeds)) == (0.99, 50_000, 10)
        assert bandit.update_mode == "asynchronous"
        sched = bandit.agents[0].schedule
        assert (sched.kind, sched.numerator, sched.shift) == ("linear_shifted", 100, 100)
        cart = get_preset("cartpole72")
        sched = cart.agents[0].schedule
        assert cart.gamma == 0.999 and (sched.numerator, sched.shift) == (40, 100)
        assert any(m.tag == "episodes_to_threshold_195_50" for m in cart.metrics)
        chain = get_preset("chain")
        assert (chain.gamma, chain.episodes, chain.epsilon.start) == (0.999, 400, 0.1)
        assert chain.metrics[0].name == "left_action_probability"


class TestRecords:
    def test_threshold_examples(self):
        assert episodes_to_threshold([200.0] * 60, 195, 50) == 50
        assert episodes_to_threshold([100.0] * 60, 195, 50) is None
        assert episodes_to_threshold([200.0] * 10, 195, 50) is None
        assert episodes_to_threshold([0, 0, 10, 10], 10, 2) == 4

    def test_threshold_from_records(self):
        recs = [RunRecord("e", "QL", 0, k + 1, "episode_return", 200.0) for k in range(50)]
        assert episodes_to_threshold(reversed(recs), 195, 50) == 50

    def test_aggregate_examples(self):
        one = aggregate([RunRecord("e", "QL", 0, 1, "m", 3.5)])
        assert (one[0].mean, one[0].std, one[0].count) == (3.5, 0.0, 1)
        two = aggregate([RunRecord("e", "QL", s, 1, "m", v) for s, v in ((0, 1.0), (1, 3.0))])
        assert (two[0].mean, two[0].std) == (2.0, pytest.approx(math.sqrt(2)))

    def test_aggregate_sample_std(self):
        vals = [1.0, 3.0]
        rows = aggregate([RunRecord("e", "QL", s, 1, "m", v) for s, v in enumerate(vals)])
        assert rows[0].std == pytest.approx(np.std(vals, ddof=1))

    def test_group_count(self):
        recs = [RunRecord("e", a, s, i, "m", float(s)) for a in "AB" for s in range(3) for i in range(4)]
        rows = aggregate(recs)
        assert len(rows) == len({(r.experiment, r.algorithm, r.metric, r.index) for r in recs})
        assert [r.key for r in rows] == sorted(r.key for r in rows)

    def test_aggregate_empty(self):
        with pytest.raises(ValueError):
            aggregate([])

    def test_csv(self, tmp_path):
        path = tmp_path / "out.csv"
        assert emit_csv([], path) == 0
        assert path.read_text() == "experiment,algorithm,seed,index,metric,value\n"
        rng = np.random.default_rng(0)
        recs = [RunRecord("e", "QL", 0, k, "max_q", float(rng.normal() * 10.0 ** rng.integers(-9, 9)))
                for k in range(1000)]
        emit_csv(recs, path)
        raw = path.read_bytes()
        assert raw.count(b"\n") == 1001 and b"\r" not in raw
        assert read_csv(path) == recs

    def test_summary_csv(self, tmp_path):
        path = tmp_path / "summary.csv"
        rows = aggregate([RunRecord("e", "QL", s, 1, "m", float(s)) for s in range(3)])
        emit_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "experiment,algorithm,metric,index,mean,std,count"
        assert lines[1] == "e,QL,m,1,1,1,3"


class TestPlot:
    def rows(self, n_series, n_points=2):
        recs = [RunRecord("e", f"A{k}", 0, i, "max_q", float(i * k)) for k in range(n_series)
                for i in range(n_points)]
        return aggregate(recs)

    def test_one_polyline(self):
        assert render_svg(self.rows(1)).count("<polyline") == 1

    def test_five_legend_entries(self):
        assert render_svg(self.rows(5)).count('class="legend"') == 5

    def test_deterministic(self, tmp_path):
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        emit_plot(self.rows(3), a)
        emit_plot(self.rows(3), b)
        assert a.read_bytes() == b.read_bytes()

    def test_mixed_metrics_rejected(self):
        recs = [RunRecord("e", "A", 0, 0, "m1", 1.0), RunRecord("e", "A", 0, 0, "m2", 1.0)]
        with pytest.raises(ValueError):
            render_svg(aggregate(recs))


class TestRunner:
    def test_zero_episodes(self):
        spec = parse_spec(base_doc(episodes=0))
        recs = run_experiment(spec)
        assert {r.index for r in recs} == {0}
        assert len(recs) == 4
        assert all(r.value == 0.0 for r in recs)

    def test_zero_episodes_returns_metrics(self):
        spec = parse_spec(base_doc(episodes=0, metrics=["episode_return", "episodes_to_threshold(1,5)"]))
        recs = run_experiment(spec)
        assert [r.metric for r in recs if r.algorithm == "QL" and r.seed == 0] == \
            ["episodes_to_threshold_1_5"]
        assert math.isnan(recs[0].value)

    def test_sample_indices(self):
        recs = run_experiment(parse_spec(base_doc(episodes=25)))
        assert sorted({r.index for r in recs}) == [0, 10, 20, 25]

    def test_records_unique(self):
        recs = run_experiment(small(get_preset("cartpole72"), episodes=20))
        keys = [(r.experiment, r.algorithm, r.seed, r.index, r.metric) for r in recs]
        assert len(keys) == len(set(keys))

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_determinism(self, name):
        spec = small(get_preset(name))
        assert run_experiment(spec) == run_experiment(spec)

    def test_parallel_equals_serial(self):
        spec = small(get_preset("chain"), seeds=(0, 1, 2))
        assert run_experiment(spec, parallel=2) == run_experiment(spec)

    @pytest.mark.parametrize("name", sorted(PRESETS))
    def test_compiled_matches_python(self, name):
        spec = small(get_preset(name), episodes=12, cadence=5)
        if name == "roulette":
            spec = spec.replace(episodes=4)
        compiled = run_experiment(spec, engine="compiled")
        python = run_experiment(spec, engine="python")
        assert compiled == python

    def test_seed_streams_independent_of_seed_list(self):
        spec = parse_spec(base_doc(seeds=[3]))
        wider = parse_spec(base_doc(seeds=[0, 1, 2, 3]))
        only = [r for r in run_experiment(wider) if r.seed == 3]
        assert run_experiment(spec) == only

    def test_divergence_flagged(self):
        doc = base_doc(env="chain(2)", gamma=0.999, episodes=1000, epsilon=0.5,
                       metrics=["max_q"], agents=[{"algorithm": "SORQL", "w": "fixed: 1000",
                                                   "allow_above_w_star": True,
                                                   "schedule": {"kind": "polynomial", "exponent": 1.0}}])
        recs = run_experiment(parse_spec(doc))
        flagged = [r for r in recs if r.metric == "diverged"]
        assert flagged and all(r.value == 1.0 for r in flagged)
        for r in flagged:
            finite = [x for x in recs if x.seed == r.seed and x.metric == "max_q"]
            assert max(x.index for x in finite) <= r.index

    def test_run_one_agent(self):
        spec = parse_spec(base_doc())
        out = run_one(spec, spec.agents[1], 0)
        assert out.agent.q_b is not None and len(out.returns) == spec.episodes


class TestCli:
    def write(self, tmp_path, doc):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps(doc))
        return str(path)

    def test_run_ok(self, tmp_path, capsys):
        out, plot = tmp_path / "r.csv", tmp_path / "r.svg"
        code = main(["run", "--config", self.write(tmp_path, base_doc()), "--out", str(out),
                     "--plot", str(plot)])
        assert code == 0
        assert out.read_text().startswith("experiment,")
        assert plot.read_text().count("<polyline") == 2
        assert "QL: final mean" in capsys.readouterr().out

    def test_run_config_error(self, tmp_path, capsys):
        assert main(["run", "--config", self.write(tmp_path, base_doc(gamma=2))]) == 1
        assert "gamma" in capsys.readouterr().err

    def test_run_missing_file(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.json")]) == 1

    def test_run_diverged(self, tmp_path):
        doc = base_doc(env="chain(2)", gamma=0.999, episodes=1000, epsilon=0.5,
                       agents=[{"algorithm": "SORQL", "w": "fixed: 1000", "allow_above_w_star": True,
                                "schedule": {"kind": "polynomial", "exponent": 1.0}}])
        assert main(["run", "--config", self.write(tmp_path, doc)]) == 2

    def test_presets(self, capsys):
        assert main(["presets", "list"]) == 0
        listing = capsys.readouterr().out
        assert all(name in listing for name in PRESETS)
        assert main(["presets", "show", "bandit39"]) == 0
        assert json.loads(capsys.readouterr().out)["gamma"] == 0.99

    def test_oracle(self, tmp_path, capsys):
        mdp = random_mdp(3, 2, 0.3, seed=4, discount=0.9)
        path = tmp_path / "m.json"
        save_mdp(mdp, path)
        assert main(["oracle", "--mdp", str(path), "--w", "star", "--tol", "1e-10"]) == 0
        out = json.loads(capsys.readouterr().out)
        q, _ = solve_fixed_point(mdp, sor_star(mdp), tol=1e-10)
        assert out["w_star"] == pytest.approx(sor_star(mdp))
        np.testing.assert_allclose(out["fixed_point"], q)

    def test_oracle_bad_w(self, tmp_path):
        path = tmp_path / "m.json"
        save_mdp(random_mdp(2, 2, 0.3, seed=1), path)
        assert main(["oracle", "--mdp", str(path), "--w", "50"]) == 1
        assert main(["oracle", "--mdp", str(path), "--w", "abc"]) == 1

    def test_bias(self, tmp_path):
        grid = tmp_path / "g.json"
        grid.write_text(json.dumps({"d": [2, 38], "w": [1, 20], "trials": 2000}))
        out = tmp_path / "b.csv"
        assert main(["bias", "--grid", str(grid), "--out", str(out)]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "estimator,d,w,k,coupled,trials,bias,se"
        assert len(lines) == 1 + 2 * 2 * 3
        rows = [line.split(",") for line in lines[1:]]
        by = {(r[0], r[1], r[2]): r[6] for r in rows}
        # coupled SOR weighting reproduces the single-max estimate on the shared stream
        assert by[("sor_weighted", "38", "20")] == by[("single", "38", "1")]

    def test_bias_bad_estimator(self, tmp_path):
        grid = tmp_path / "g.json"
        grid.write_text(json.dumps({"estimators": ["triple"]}))
        assert main(["bias", "--grid", str(grid), "--out", str(tmp_path / "b.csv")]) == 1
