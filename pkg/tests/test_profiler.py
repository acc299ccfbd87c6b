import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dynslice.errors import FormatError, PreconditionError
from dynslice.model import HiddenTrace, ModelConfig, init_model
from dynslice.profiler import (
    LayerProfile,
    LRAccumulator,
    collect_covariances,
    normalize_lr,
    profile_lr,
    traced_batches,
)
from dynslice.train import model_from_tensors


def identity_block_model(n_layers=3, d=16):
    m = init_model(ModelConfig(n_layers=n_layers, d_model=d, n_heads=2, d_ff=32, max_seq=32), seed=4)
    t = m.tensors()
    for k in t:
        if k.endswith(".wo") or k.endswith(".w_down"):
            t[k] = np.zeros_like(t[k])
    return model_from_tensors(m, t)


def test_identity_blocks_score_one():
    m = identity_block_model()
    prof = profile_lr(m, np.arange(100) % 256)
    np.testing.assert_allclose(prof.raw_lr, 1.0, rtol=0, atol=1e-12)
    assert prof.degenerate
    np.testing.assert_array_equal(prof.normalized_lr, [0.5, 0.5, 0.5])


def test_antipodal_trace_scores_minus_one():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 10, 8))
    acc = LRAccumulator(2)
    acc.add_trace(HiddenTrace(block_inputs=[x, 2 * x], block_outputs=[-x, -3 * x]))
    np.testing.assert_allclose(acc.raw_lr(), [-1.0, -1.0], atol=1e-12)


def test_zero_vectors_are_skipped_and_tallied():
    acc = LRAccumulator(1)
    x = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    y = np.array([[1.0, 0.0], [5.0, 5.0], [1.0, -1.0]])
    acc.add(0, x, y)
    assert acc.skipped[0] == 1 and acc.count[0] == 2
    assert acc.raw_lr()[0] == pytest.approx(0.5)


def test_all_positions_skipped_is_an_error():
    acc = LRAccumulator(1)
    acc.add(0, np.zeros((3, 4)), np.ones((3, 4)))
    with pytest.raises(PreconditionError):
        acc.raw_lr()


def test_matches_offline_recomputation(tmp_path, trained_model, corpora):
    corpus = corpora["lr_calib"]
    prof = profile_lr(trained_model, corpus)
    # dump every trace, then recompute cosines from the files alone
    files = []
    for b, tr in enumerate(traced_batches(trained_model, corpus)):
        path = tmp_path / f"trace{b}.npz"
        np.savez(path, **{f"in{i}": a for i, a in enumerate(tr.block_inputs)},
                 **{f"out{i}": a for i, a in enumerate(tr.block_outputs)})
        files.append(path)
    n = trained_model.config.n_layers
    totals, counts = np.zeros(n), np.zeros(n)
    for path in files:
        z = np.load(path)
        for i in range(n):
            a = z[f"in{i}"].reshape(-1, z[f"in{i}"].shape[-1])
            b = z[f"out{i}"].reshape(-1, a.shape[-1])
            for u, v in zip(a, b):
                totals[i] += float(u @ v) / (np.sqrt(u @ u) * np.sqrt(v @ v))
                counts[i] += 1
    assert counts[0] == len(corpus)
    assert np.max(np.abs(prof.raw_lr - totals / counts)) <= 1e-6
    assert np.all(np.abs(prof.raw_lr) <= 1)


def test_batch_size_independence(trained_model, corpora):
    corpus = corpora["lr_calib"][:2048]
    a = profile_lr(trained_model, corpus, batch_size=1)
    b = profile_lr(trained_model, corpus, batch_size=8)
    assert np.max(np.abs(a.raw_lr - b.raw_lr)) <= 1e-9


def test_batch_order_independence(trained_model, corpora):
    corpus = corpora["lr_calib"][:2048]
    traces = list(traced_batches(trained_model, corpus, batch_size=2))
    fwd, rev = LRAccumulator(4), LRAccumulator(4)
    for tr in traces:
        fwd.add_trace(tr)
    for tr in reversed(traces):
        rev.add_trace(tr)
    assert np.max(np.abs(fwd.raw_lr() - rev.raw_lr())) <= 1e-9


def test_accumulators_merge(trained_model, corpora):
    traces = list(traced_batches(trained_model, corpora["lr_calib"][:2048], batch_size=2))
    whole, left, right = LRAccumulator(4), LRAccumulator(4), LRAccumulator(4)
    for j, tr in enumerate(traces):
        whole.add_trace(tr)
        (left if j % 2 else right).add_trace(tr)
    assert np.max(np.abs(left.merge(right).raw_lr() - whole.raw_lr())) <= 1e-9


def test_empty_corpus():
    with pytest.raises(PreconditionError):
        profile_lr(identity_block_model(), [])


def test_normalize_examples():
    v, deg = normalize_lr([0.2, 0.5, 0.8])
    np.testing.assert_allclose(v, [0.0, 0.5, 1.0], atol=1e-15)
    assert not deg
    v, deg = normalize_lr([0.9, 0.9, 0.9])
    np.testing.assert_array_equal(v, [0.5, 0.5, 0.5])
    assert deg


def test_normalize_single_value_is_degenerate():
    v, deg = normalize_lr([0.3])
    assert deg and v.tolist() == [0.5]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=40, unique=True))
def test_normalize_preserves_order(raw):
    # rounding can merge values closer than float resolution, never reorder them
    v, deg = normalize_lr(raw)
    assert not deg
    assert v.min() == 0.0 and v.max() == 1.0
    order = np.argsort(raw, kind="stable")
    assert np.all(np.diff(v[order]) >= 0)
    again, _ = normalize_lr(v)
    np.testing.assert_allclose(again, v, atol=1e-15)


def test_normalize_strictly_increasing():
    raw = np.sort(np.random.default_rng(0).uniform(-1, 1, 30))
    v, _ = normalize_lr(raw)
    assert np.all(np.diff(v) > 0) and v[0] == 0.0 and v[-1] == 1.0


def test_profile_json_roundtrip(tmp_path):
    prof = LayerProfile.from_raw([0.1, 0.7, 0.4], tokens_seen=99, calibration_corpus_id="c", model_id="m",
                                 d_model=16)
    prof.save(tmp_path / "p.json")
    back = LayerProfile.load(tmp_path / "p.json")
    assert back.to_dict() == prof.to_dict()
    assert set(prof.to_dict()) >= {"model_id", "corpus_id", "raw_lr", "normalized_lr", "tokens_seen",
                                    "degenerate_flag", "skip_tally"}


def test_profile_bad_json(tmp_path):
    (tmp_path / "p.json").write_text('{"raw_lr": [1]}')
    with pytest.raises(FormatError):
        LayerProfile.load(tmp_path / "p.json")


# -- Gram matrices -------------------------------------------------------------------

def test_gram_single_token_basis_vector():
    m = init_model(ModelConfig(n_layers=1, d_model=4, n_heads=2, d_ff=8, max_seq=8), seed=0)
    t = m.tensors()
    t["token_embedding"] = np.zeros_like(t["token_embedding"])
    t["token_embedding"][7, 0] = 1.0
    m = model_from_tensors(m, t)
    with pytest.warns(RuntimeWarning):
        stats = collect_covariances(m, [7])
    expect = np.zeros((4, 4))
    expect[0, 0] = 1
    np.testing.assert_array_equal(stats.grams[0], expect)
    assert stats.rows_seen == 1 and stats.warnings


def test_gram_merge_of_halves(trained_model, corpora):
    corpus = corpora["lr_calib"]
    whole = collect_covariances(trained_model, corpus)
    half = len(corpus) // 2
    merged = collect_covariances(trained_model, corpus[:half]).merge(collect_covariances(trained_model, corpus[half:]))
    assert merged.rows_seen == whole.rows_seen
    for a, b in zip(whole.grams, merged.grams):
        assert np.max(np.abs(a - b)) <= 1e-9 * np.max(np.abs(a))


def test_gram_trace_matches_norm_sum(trained_model, corpora):
    corpus = corpora["lr_calib"]
    stats = collect_covariances(trained_model, corpus)
    sq = np.zeros(trained_model.config.n_layers)
    for tr in traced_batches(trained_model, corpus):
        for i, x in enumerate(tr.block_inputs):
            sq[i] += float(np.sum(np.asarray(x, dtype=np.float64) ** 2))
    for i, g in enumerate(stats.grams):
        assert np.array_equal(g, g.T)
        assert abs(np.trace(g) - sq[i]) <= 1e-6 * sq[i]
        assert np.linalg.eigvalsh(g).min() >= -1e-9 * np.trace(g)
