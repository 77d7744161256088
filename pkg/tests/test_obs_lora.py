import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from obsprune.hessian import hessian_from_gradient_cols, hessian_from_gradient_rows
from obsprune.matcore import DimensionError, PruneMask
from obsprune.obs_full import SearchStrategy, obs_update_full, saliency_full
from obsprune.obs_lora import (
    ContractViolation,
    LoraAdapter,
    apply_solution,
    compact_rank,
    format_adapter,
    lora_hessians,
    lora_obs_update,
    lora_shifts,
    parse_adapter,
    prune_adapter,
    read_adapter,
    saliency_lora,
    select_mask_lora,
    write_adapter,
)
from obsprune.oracle import enumerate_lora_masks
from obsprune.schedule import scaling_delta


def eye_h(r):
    return hessian_from_gradient_cols(np.zeros((1, r)), 1.0)


def random_pair(rng, r, m=4, n=5):
    A = rng.normal(size=(r, n))
    B = rng.normal(size=(m, r))
    G_A = rng.normal(size=(r, n))
    G_B = rng.normal(size=(m, r))
    ad = LoraAdapter(A, B, alpha=2.0 * r)
    return ad, (G_A, G_B), lora_hessians(G_A, G_B)


def test_adapter_invariants():
    ad = LoraAdapter(np.ones((2, 3)), np.ones((4, 2)), alpha=4.0)
    assert ad.rank == 2 and ad.scaling == 2.0
    np.testing.assert_array_equal(ad.delta_weight(), 2.0 * np.ones((4, 2)) @ np.ones((2, 3)))
    with pytest.raises(DimensionError):
        LoraAdapter(np.ones((2, 3)), np.ones((4, 3)), 1.0)
    with pytest.raises(ValueError):
        LoraAdapter(np.ones((2, 3)), np.ones((4, 2)), 0.0)


def test_shifts_examples():
    rng = np.random.default_rng(0)
    ad, (G_A, G_B), (H_A, H_B) = random_pair(rng, 4)
    At, Bt = lora_shifts(ad, np.zeros_like(G_A), np.zeros_like(G_B), H_A, H_B)
    np.testing.assert_array_equal(At, ad.A)
    np.testing.assert_array_equal(Bt, ad.B)
    zero_A = LoraAdapter(np.zeros_like(ad.A), ad.B, ad.alpha)
    At, _ = lora_shifts(zero_A, G_A, G_B, eye_h(4), H_B)
    np.testing.assert_allclose(At, -G_A)
    At, Bt = lora_shifts(ad, G_A, G_B, H_A, H_B)
    ref_A = np.array([[ad.A[i, j] - sum(H_A.inverse[i, l] * G_A[l, j] for l in range(4)) for j in range(5)]
                      for i in range(4)])
    ref_B = np.array([[ad.B[i, j] - sum(G_B[i, l] * H_B.inverse[l, j] for l in range(4)) for j in range(4)]
                      for i in range(4)])
    np.testing.assert_allclose(At, ref_A, atol=1e-12)
    np.testing.assert_allclose(Bt, ref_B, atol=1e-12)


def test_saliency_identity_reduction_and_decomposition():
    rng = np.random.default_rng(1)
    ad, (G_A, G_B), (H_A, H_B) = random_pair(rng, 5)
    mask = PruneMask.columns([0, 3], 5)
    s = saliency_lora(ad.A, ad.B, np.eye(5), np.eye(5), mask)
    np.testing.assert_allclose(s, np.sum(ad.B[:, [0, 3]] ** 2) + np.sum(ad.A[[0, 3], :] ** 2))
    with pytest.raises(ValueError):
        saliency_lora(ad.A, ad.B, np.eye(5), np.eye(5), PruneMask.columns([], 5))
    At, Bt = lora_shifts(ad, G_A, G_B, H_A, H_B)
    np.testing.assert_allclose(saliency_lora(At, Bt, H_A.inverse, H_B.inverse, mask),
                               saliency_full(Bt, H_B.inverse, mask) + saliency_full(At.T, H_A.inverse, mask),
                               rtol=1e-12)


def test_select_mask_pair_norms():
    # pair norms ||B_j||^2 + ||A_j||^2 = 5, 1, 3
    A = np.array([[1.0, 0], [0, 0], [1, 0]])
    B = np.array([[2.0, 1, np.sqrt(2)], [0, 0, 0]])
    ad = LoraAdapter(A, B, 3.0)
    zeros = (np.zeros_like(A), np.zeros_like(B))
    assert select_mask_lora(ad, zeros, (eye_h(3), eye_h(3)), 1).mask.indices == (1,)

    rng = np.random.default_rng(2)
    A = rng.normal(size=(5, 4))
    B = rng.normal(size=(3, 5))
    A[2] = 0.0
    B[:, 2] = 0.0
    ad = LoraAdapter(A, B, 5.0)
    zeros = (np.zeros_like(A), np.zeros_like(B))
    for strategy in SearchStrategy:
        assert 2 in select_mask_lora(ad, zeros, (eye_h(5), eye_h(5)), 1, strategy).mask.indices


def test_select_mask_matches_oracle_r6():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ad, (G_A, G_B), (H_A, H_B) = random_pair(rng, 6)
        cand = select_mask_lora(ad, (G_A, G_B), (H_A, H_B), 2, SearchStrategy.EXHAUSTIVE)
        oracle = enumerate_lora_masks(ad.B, G_B, H_B, ad.A, G_A, H_A, 2)
        assert cand.mask == oracle.best_mask


def test_update_examples():
    rng = np.random.default_rng(4)
    ad, grads, hess = random_pair(rng, 4)
    sol = lora_obs_update(ad, grads, hess, PruneMask.columns(range(4), 4))
    np.testing.assert_allclose(sol.delta_B, -ad.B, atol=1e-10)
    np.testing.assert_allclose(sol.delta_A, -ad.A, atol=1e-10)

    zeros = (np.zeros_like(ad.A), np.zeros_like(ad.B))
    sol = lora_obs_update(ad, zeros, (eye_h(4), eye_h(4)), PruneMask.columns([1], 4))
    exp_A = np.zeros_like(ad.A)
    exp_A[1] = -ad.A[1]
    exp_B = np.zeros_like(ad.B)
    exp_B[:, 1] = -ad.B[:, 1]
    np.testing.assert_allclose(sol.delta_A, exp_A, atol=1e-15)
    np.testing.assert_allclose(sol.delta_B, exp_B, atol=1e-15)

    (G_A, G_B), (H_A, H_B) = grads, hess
    mask = PruneMask.columns([0, 2], 4)
    sol = lora_obs_update(ad, grads, hess, mask)
    np.testing.assert_allclose(sol.delta_B, obs_update_full(ad.B, G_B, H_B, mask).delta, atol=1e-10)
    np.testing.assert_allclose(sol.delta_A, obs_update_full(ad.A.T, G_A.T, H_A, mask).delta.T, atol=1e-10)
    new = apply_solution(ad, sol)
    assert np.max(np.abs(new.B[:, [0, 2]])) < 1e-10
    assert np.max(np.abs(new.A[[0, 2], :])) < 1e-10


def test_compact_examples():
    A = np.array([[1.0, 2], [0, 0], [3, 4]])
    B = np.array([[1.0, 0, 2], [3, 0, 4]])
    ad = LoraAdapter(A, B, 3.0)
    small = compact_rank(ad, PruneMask.columns([1], 3))
    assert small.rank == 2
    np.testing.assert_array_equal(small.B @ small.A, B @ A)
    same = compact_rank(ad, PruneMask.columns([], 3))
    np.testing.assert_array_equal(same.A, A)
    np.testing.assert_array_equal(same.B, B)
    with pytest.raises(ContractViolation):
        compact_rank(ad, PruneMask.columns([0], 3))
    with pytest.raises(DimensionError):
        compact_rank(ad, PruneMask.columns([0], 4))


def test_compaction_scaling_delta():
    rng = np.random.default_rng(5)
    ad, grads, hess = random_pair(rng, 5)
    mask = PruneMask.columns([1, 4], 5)
    updated = apply_solution(ad, lora_obs_update(ad, grads, hess, mask))
    for alpha in (None, 3.0, 6.0):
        new = compact_rank(updated, mask, alpha)
        diff = new.delta_weight() - updated.delta_weight()
        np.testing.assert_allclose(diff, scaling_delta(updated, new, mask.complement()), atol=1e-12)
    # proportional alpha keeps alpha / r fixed, so the effective update is untouched
    new = compact_rank(updated, mask, alpha=updated.scaling * 3)
    np.testing.assert_allclose(new.delta_weight(), updated.delta_weight(), atol=1e-12)


def test_prune_adapter_objective_sums_factors():
    rng = np.random.default_rng(6)
    ad, (G_A, G_B), (H_A, H_B) = random_pair(rng, 5)
    new, entry = prune_adapter(ad, (G_A, G_B), (H_A, H_B), 2)
    assert new.rank == 3 and entry.axis == "rank" and entry.host_dim == 5
    At, Bt = lora_shifts(ad, G_A, G_B, H_A, H_B)
    newton = -0.5 * np.trace(G_B @ H_B.inverse @ G_B.T) - 0.5 * np.trace(G_A.T @ H_A.inverse @ G_A)
    np.testing.assert_allclose(entry.quad_objective, newton + 0.5 * entry.saliency, rtol=1e-9)


def test_adapter_text_round_trip(tmp_path):
    ad, _, _ = random_pair(np.random.default_rng(7), 3)
    text = format_adapter(ad)
    assert text.splitlines()[0].split()[0] == "3"
    back = parse_adapter(text)
    np.testing.assert_array_equal(back.A, ad.A)
    np.testing.assert_array_equal(back.B, ad.B)
    assert back.alpha == ad.alpha
    write_adapter(tmp_path / "a.txt", ad)
    np.testing.assert_array_equal(read_adapter(tmp_path / "a.txt").B, ad.B)


def test_hessian_modes():
    G_A = np.random.default_rng(8).normal(size=(3, 6))
    G_B = np.random.default_rng(9).normal(size=(4, 3))
    H_A, H_B = lora_hessians(G_A, G_B, 0.1)
    np.testing.assert_allclose(H_A.matrix, hessian_from_gradient_rows(G_A, 0.1).matrix)
    np.testing.assert_allclose(H_B.matrix, hessian_from_gradient_cols(G_B, 0.1).matrix)
    assert H_A.matrix.shape == H_B.matrix.shape == (3, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6), st.data())
def test_separability_and_product_preservation(seed, r, data):
    rng = np.random.default_rng(seed)
    ad, grads, hess = random_pair(rng, r)
    (G_A, G_B), (H_A, H_B) = grads, hess
    k = data.draw(st.integers(1, r - 1))
    mask = PruneMask.columns(sorted(data.draw(st.permutations(range(r)))[:k]), r)
    At, Bt = lora_shifts(ad, G_A, G_B, H_A, H_B)
    joint = saliency_lora(At, Bt, H_A.inverse, H_B.inverse, mask)
    parts = saliency_full(Bt, H_B.inverse, mask) + saliency_full(At.T, H_A.inverse, mask)
    assert abs(joint - parts) <= 1e-12 * max(1.0, parts)
    updated = apply_solution(ad, lora_obs_update(ad, grads, hess, mask))
    new = compact_rank(updated, mask)
    assert np.max(np.abs(new.B @ new.A - updated.B @ updated.A)) < 1e-12
