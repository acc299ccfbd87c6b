from fractions import Fraction

import numpy as np
import pytest

from dynslice.container import load_model, save_model
from dynslice.errors import PreconditionError, TransformError
from dynslice.evaluation import perplexity
from dynslice.linalg import random_orthogonal, sym_eig, truncation_error
from dynslice.model import ModelConfig, forward, init_model, rms_norm
from dynslice.profiler import CovarianceStats, LayerProfile, collect_covariances, profile_lr, traced_batches
from dynslice.schedule import build_schedule, constant_schedule
from dynslice.slicer import (
    SlicedModel,
    absorb_norm_scales,
    compute_rotations,
    count_parameters,
    drop_layers_baseline,
    slice_model,
)
from dynslice.train import model_from_tensors

from conftest import with_random_gains


@pytest.fixture(scope="module")
def prepared(trained_model, corpora):
    """Absorbed trained model with its Gram statistics and rotations."""
    model = absorb_norm_scales(with_random_gains(trained_model, seed=3, spread=0.2))
    stats = collect_covariances(model, corpora["ppl_calib"])
    return model, stats, compute_rotations(stats)


def _prompts(n=64, t=32, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (n, t))


def test_absorb_preserves_logits():
    model = with_random_gains(init_model(ModelConfig(), seed=2), seed=7)
    absorbed = absorb_norm_scales(model)
    toks = _prompts()
    a, _ = forward(model, toks)
    b, _ = forward(absorbed, toks)
    assert np.max(np.abs(a - b)) <= 1e-5
    for blk in absorbed.blocks:
        assert np.all(blk.attn_norm == 1) and np.all(blk.mlp_norm == 1)
    assert np.all(absorbed.final_norm == 1)


def test_absorb_unit_gains_is_identity():
    model = init_model(ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32), seed=0)
    out = absorb_norm_scales(model)
    for x, y in zip(model.tensors().values(), out.tensors().values()):
        assert x.tobytes() == y.tobytes()


def test_absorb_algebra_small():
    rng = np.random.default_rng(0)
    x, g, w = rng.standard_normal((1, 3)), rng.standard_normal(3), rng.standard_normal((3, 2))
    lhs = rms_norm(x, g, 3) @ w
    rhs = rms_norm(x, np.ones(3), 3) @ (g[:, None] * w)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-14)


def test_rotation_diagonal_gram():
    rot = compute_rotations(CovarianceStats([np.diag([4.0, 1.0])]))[0]
    assert abs(abs(rot.eigenvectors[0, 0]) - 1) < 1e-15


def test_rotation_isotropic_gram():
    rot = compute_rotations(CovarianceStats([np.eye(6)]))[0]
    x = np.random.default_rng(1).standard_normal((5000, 6)) @ random_orthogonal(6, 0)
    err = truncation_error(x, rot.eigenvectors, 4)
    assert abs(err / np.sum(x * x) - 2 / 6) < 0.05


def test_rotation_trace_on_toy_stats(prepared):
    _, stats, rots = prepared
    for g, r in zip(stats.grams, rots):
        assert abs(r.eigenvalues.sum() - np.trace(g)) <= 1e-8 * np.trace(g)
        assert np.all(np.diff(r.eigenvalues) <= 0)


def test_zero_slice_invariance(prepared, corpora):
    model, _, rots = prepared
    sliced = slice_model(model, constant_schedule(4, 0.0, 64), rots)
    assert sliced.widths == (64,) * 4
    toks = _prompts()
    a, _ = forward(model, toks)
    b, _ = forward(sliced, toks)
    assert np.max(np.abs(a - b)) <= 1e-3
    p0 = perplexity(model, corpora["held_out"])
    p1 = perplexity(sliced, corpora["held_out"])
    assert abs(p1 - p0) <= 1e-3 * p0


def test_constant_schedule_code_path(prepared):
    model, _, rots = prepared
    a = slice_model(model, constant_schedule(4, 0.3, 64), rots)
    b = slice_model(model, build_schedule([0.2, 1.0, 0.0, 0.6], 0.3, 0.3, 64), rots)
    c = slice_model(model, [45, 45, 45, 45], rots)
    for x, y, z in zip(a.tensors().values(), b.tensors().values(), c.tensors().values()):
        assert x.tobytes() == y.tobytes() == z.tobytes()


def test_source_model_not_mutated(prepared):
    model, _, rots = prepared
    before = {k: v.copy() for k, v in model.tensors().items()}
    slice_model(model, build_schedule([0, 0.5, 1, 0.2], 0.3, 0.1, 64), rots)
    for k, v in model.tensors().items():
        assert np.array_equal(v, before[k])


def test_slicing_requires_absorbed_gains(trained_model):
    bad = with_random_gains(trained_model, seed=1)
    rots = [np.eye(64)] * 4
    with pytest.raises(PreconditionError, match="absorb"):
        slice_model(bad, [64] * 4, rots)


@pytest.mark.parametrize("widths,rots", [([64] * 3, 4), ([64] * 4, 3), ([0, 64, 64, 64], 4)])
def test_slicing_coverage_errors(prepared, widths, rots):
    model = prepared[0]
    with pytest.raises(TransformError):
        slice_model(model, widths, [np.eye(64)] * rots)


def test_low_rank_single_block():
    rng = np.random.default_rng(0)
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, d_ff=16, max_seq=32)
    m = init_model(cfg, seed=0)
    t = m.tensors()
    basis = random_orthogonal(8, seed=5)[:, :2]
    t["token_embedding"] = (rng.standard_normal((256, 2)) * [3.0, 1.0] @ basis.T).astype(np.float32)
    m = model_from_tensors(m, t)
    toks = rng.integers(0, 256, 512)
    stats = collect_covariances(m, toks)
    q = compute_rotations(stats)[0].eigenvectors
    x = np.concatenate([tr.block_inputs[0].reshape(-1, 8) for tr in traced_batches(m, toks)])
    total = float(np.sum(x * x))
    assert truncation_error(x, q, 2) <= 1e-6 * total
    sliced = slice_model(m, [2], [q])
    assert sliced.blocks[0].wq.shape == (2, 8)


def test_reconstruction_optimality_per_layer(prepared, corpora):
    model, stats, rots = prepared
    sched = build_schedule(np.array([0.1, 0.9, 0.4, 1.0]), 0.3, 0.1, 64)
    xs = [[] for _ in range(4)]
    for tr in traced_batches(model, corpora["ppl_calib"]):
        for i, x in enumerate(tr.block_inputs):
            xs[i].append(x.reshape(-1, 64))
    for i, (rot, k) in enumerate(zip(rots, sched.kept_dims)):
        x = np.concatenate(xs[i])
        err = truncation_error(x, rot.eigenvectors, int(k))
        discarded = float(rot.eigenvalues[int(k):].sum())
        # block 0 sees only the embeddings of bytes present in the corpus, so its
        # rank can fall below k and the discarded sum is pure roundoff
        floor = 1e-12 * float(rot.eigenvalues.sum())
        assert abs(err - discarded) <= 1e-5 * abs(discarded) + floor
        for s in range(20):
            assert err <= truncation_error(x, random_orthogonal(64, seed=100 * i + s), int(k))


def test_adapter_chain_identity(prepared):
    model, _, rots = prepared
    sliced = slice_model(model, [64] * 4, rots)
    chain = sliced.embedding_projector.astype(np.float64)
    for a in sliced.adapters:
        chain = chain @ a.astype(np.float64)
    chain = chain @ sliced.head_reconstructor.astype(np.float64)
    assert np.max(np.abs(chain - np.eye(64))) <= 1e-6


def test_adapters_compose_projectors(prepared):
    model, _, rots = prepared
    widths = [60, 40, 50, 30]
    sliced = slice_model(model, widths, rots)
    ps = [r.eigenvectors[:, :k] for r, k in zip(rots, widths)]
    for i, a in enumerate(sliced.adapters):
        assert a.shape == (widths[i], widths[i + 1])
        np.testing.assert_allclose(a, ps[i].T @ ps[i + 1], atol=1e-6)
    assert sliced.head_reconstructor.shape == (30, 64)


def test_sliced_container_roundtrip(tmp_path, prepared):
    model, _, rots = prepared
    sliced = slice_model(model, [60, 40, 50, 30], rots, provenance={"schedule": "s.json"})
    path = save_model(sliced, tmp_path / "s")
    back = load_model(path)
    assert isinstance(back, SlicedModel) and back.widths == sliced.widths
    toks = _prompts(4, 16)
    assert forward(back, toks)[0].tobytes() == forward(sliced, toks)[0].tobytes()


# -- parameter accounting -----------------------------------------------------------

def _dense_total(v, d, f, n):
    return v * d + n * (4 * d * d + 2 * d * f + 2 * d) + d + d * v


def _sliced_total(v, d, f, widths):
    blocks = sum(3 * k * d + d * k + 2 * k * f + 2 * k for k in widths)
    adapters = sum(a * b for a, b in zip(widths, widths[1:]))
    return v * d + d * widths[0] + blocks + adapters + widths[-1] * d + d + d * v


def test_count_toy_unsliced():
    m = init_model(ModelConfig(), seed=0)
    pc = count_parameters(m)
    assert pc.total == _dense_total(256, 64, 256, 4) == 229_952
    assert pc.total == sum(a.size for a in m.tensors().values())
    assert pc.per_block == (49_280,) * 4


def test_full_width_slice_adds_parameters(prepared):
    model, _, rots = prepared
    sliced = slice_model(model, [64] * 4, rots)
    assert count_parameters(sliced).total >= count_parameters(model).total


def test_sliced_pruned_fraction_oracle(prepared, trained_model, corpora):
    model, _, rots = prepared
    prof = profile_lr(trained_model, corpora["lr_calib"])
    sched = build_schedule(prof.normalized_lr, 0.3, 0.1, 64)
    sliced = slice_model(model, sched, rots)
    pc = count_parameters(sliced, reference=model)
    oracle = 1 - _sliced_total(256, 64, 256, [int(k) for k in sched.kept_dims]) / _dense_total(256, 64, 256, 4)
    assert 0.2 <= pc.pruned_fraction_vs <= 0.4
    assert pc.pruned_fraction_vs == pytest.approx(oracle, abs=1e-15)
    assert pc.pruned_fraction_vs != sched.realized_mean_slice


def _deep_model(n):
    return init_model(ModelConfig(n_layers=n, d_model=8, n_heads=2, d_ff=16, max_seq=16), seed=0)


def test_drop_nine_of_thirty_two():
    model = _deep_model(32)
    lr = np.random.default_rng(0).uniform(size=32)
    new, rep = drop_layers_baseline(model, lr, 9)
    assert rep.block_pruned_fraction == Fraction(9, 32) == Fraction(28125, 100000)
    assert len(rep.dropped) == 9 and new.config.n_layers == 23
    assert set(rep.dropped) == set(np.argsort(-lr)[:9].tolist())


def test_drop_zero_is_unchanged():
    model = _deep_model(4)
    new, rep = drop_layers_baseline(model, [0.1, 0.2, 0.3, 0.4], 0)
    assert rep.dropped == () and rep.block_pruned_fraction == 0
    for a, b in zip(model.tensors().values(), new.tensors().values()):
        assert a.tobytes() == b.tobytes()


def test_drop_keeps_least_redundant_in_order():
    model = _deep_model(4)
    prof = LayerProfile.from_raw([0.3, 0.9, 0.1, 0.5], tokens_seen=1)
    new, rep = drop_layers_baseline(model, prof, 1)
    assert rep.dropped == (1,) and rep.kept == (0, 2, 3)
    for j, i in enumerate(rep.kept):
        assert new.blocks[j] is model.blocks[i]
    logits, _ = forward(new, [1, 2, 3])
    assert logits.shape == (3, 256)


def test_drop_ties_drop_lower_index_first():
    _, rep = drop_layers_baseline(_deep_model(4), [1.0, 1.0, 0.0, 1.0], 2)
    assert rep.dropped == (0, 1)


@pytest.mark.parametrize("count", [4, 5, -1])
def test_drop_count_out_of_range(count):
    with pytest.raises(PreconditionError):
        drop_layers_baseline(_deep_model(4), [0.1, 0.2, 0.3, 0.4], count)
