import json

import numpy as np
import pytest

from rdpo.evaluation import (
    ABLATION_COLUMNS,
    ABLATION_ROWS,
    TooManyDiverged,
    ablation_csv,
    ablation_table,
    compare_models,
    evaluate_model,
    generate,
    heldout_conditions,
    report_from_residuals,
    score_reference,
    summarize,
    win_rate,
)


@pytest.fixture(scope="module")
def conds(small_dataset):
    return heldout_conditions(small_dataset, 20)


def test_oracle_scores_real_trajectories_near_zero(conds):
    rep = score_reference(conds)
    assert rep.overall["n"] == 20 and rep.overall["mean"] <= 1e-9


def test_heldout_conditions_bounds(small_dataset):
    with pytest.raises(ValueError):
        heldout_conditions(small_dataset, len(small_dataset.heldout) + 1)


def test_self_comparison_is_half(quick_model, conds):
    w = compare_models(quick_model, quick_model, conds, seed=0)
    assert w.rate == 0.5 and w.ties == len(conds)


def test_win_rate_antisymmetric():
    g = np.random.default_rng(0)
    a, b = g.random(50), g.random(50)
    b[:5] = a[:5]
    assert win_rate(a, b).rate + win_rate(b, a).rate == pytest.approx(1.0)
    # a diverged sample loses to any finite one
    assert win_rate(np.array([np.nan]), np.array([1.0])).rate == 0.0


def test_compare_antisymmetric_on_models(quick_model, conds):
    ab = compare_models(quick_model, _like(quick_model, 5), conds, seed=1)
    ba = compare_models(_like(quick_model, 5), quick_model, conds, seed=1)
    assert ab.rate + ba.rate == pytest.approx(1.0)


def _like(params, seed):
    """Same architecture with slightly perturbed weights."""
    from rdpo.formats import to_f32

    g = np.random.default_rng(seed)
    return params.replace({k: to_f32(v + 0.01 * g.standard_normal(v.shape)) for k, v in params.tensors.items()})


def test_report_bytes_deterministic_and_jobs_invariant(quick_model, conds):
    a = evaluate_model(quick_model, conds, n_samples=3, seed=4, jobs=1)
    b = evaluate_model(quick_model, conds, n_samples=3, seed=4, jobs=4)
    assert a.to_json() == b.to_json()
    doc = json.loads(a.to_json())
    assert doc["overall"]["n"] == 60


def test_generate_shape_and_jobs(quick_model, small_dataset):
    big = heldout_conditions(small_dataset, 24)
    s1 = generate(quick_model, big, 2, seed=0, jobs=1)
    s2 = generate(quick_model, big, 2, seed=0, jobs=3)
    assert s1.shape == (24, 2, 64)
    np.testing.assert_array_equal(s1, s2)


def test_too_many_diverged(conds):
    # 200 samples allow 2 divergences, not 3
    res = np.zeros((len(conds), 10))
    res[0, :3] = np.nan
    with pytest.raises(TooManyDiverged):
        report_from_residuals(res, conds, 0.0)
    res[0, 2] = 0.0
    assert report_from_residuals(res, conds, 0.0).diverged == 2


def test_summarize_ignores_nan():
    s = summarize(np.array([1.0, 2.0, 3.0, np.nan]))
    assert s["n"] == 3 and s["median"] == 2.0
    assert summarize(np.array([np.nan]))["median"] is None


def test_ablation_table_absent_rows_and_base_consistency(quick_model, conds, tmp_path):
    other = _like(quick_model, 1)
    rows, reports = ablation_table({"base": quick_model, "sft": other, "iter1": other}, conds, n_samples=2,
                                   seed=0, path=tmp_path / "a.csv")
    by = {r.checkpoint: r for r in rows}
    assert [r.checkpoint for r in rows] == list(ABLATION_ROWS)
    assert by["rdpo_w_sft"].status == "absent" and by["iter3"].status == "absent"
    assert by["base"].win == 0.5
    assert by["sft"].median == by["iter1"].median
    alone = evaluate_model(quick_model, conds, n_samples=2, seed=0)
    assert by["base"].median == alone.median
    text = (tmp_path / "a.csv").read_text()
    assert text == ablation_csv(rows)
    assert text.splitlines()[0] == ",".join(ABLATION_COLUMNS)
    assert "rdpo_w_sft,absent,,,,,," in text
