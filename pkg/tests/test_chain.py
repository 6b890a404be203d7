import numpy as np
import pytest

from endomosaic.chain import (ChainLink, InsufficientMatches, TransformChain,
                              filter_matches_closed_chain, loop_residual)
from endomosaic.register import Homography, MatchSet, symmetric_transfer_error


def _identity_chain(n=4, matches_per_link=10):
    rng = np.random.default_rng(0)
    links = []
    for _ in range(n):
        src = rng.uniform(0, 200, (matches_per_link, 2))
        links.append(ChainLink(Homography.identity(), MatchSet(src, src.copy())))
    return TransformChain(links)


def _synthetic_closed_chain(n_frames=8, matches_per_link=40, seed=0):
    """Closed loop built from per-frame placements: links compose to identity."""
    rng = np.random.default_rng(seed)
    placements = [Homography.identity()]
    for _ in range(n_frames - 1):
        m = np.eye(3)
        m[0, 2], m[1, 2] = rng.uniform(-40, 40, 2)
        m[0, 0] = 1 + rng.uniform(-0.05, 0.05)
        m[1, 1] = 1 + rng.uniform(-0.05, 0.05)
        m[0, 1] = rng.uniform(-0.05, 0.05)
        m[1, 0] = rng.uniform(-0.05, 0.05)
        m[2, 0], m[2, 1] = rng.uniform(-1e-4, 1e-4, 2)
        placements.append(Homography(m))
    links = []
    for i in range(n_frames):
        j = (i + 1) % n_frames
        h = placements[j].inverse().compose(placements[i])
        src = rng.uniform(20, 300, (matches_per_link, 2))
        dst = h.apply(src)
        links.append(ChainLink(h, MatchSet(src, dst)))
    return TransformChain(links)


def test_identity_links_zero_residual():
    assert loop_residual(_identity_chain()) == pytest.approx(0.0, abs=1e-14)


def test_exact_synthetic_chain_residual_tiny():
    chain = _synthetic_closed_chain()
    assert loop_residual(chain) < 1e-9


def test_single_bad_link_residual_is_its_perturbation():
    chain = _identity_chain(n=5)
    chain.links[2].h = Homography.translation(5.0, 0.0)
    # composition == the perturbed link, so the residual is ||T - I||_F = 5
    assert loop_residual(chain) == pytest.approx(5.0, abs=1e-12)
    chain.links[2].h = Homography.translation(3.0, 4.0)
    assert loop_residual(chain) == pytest.approx(5.0, abs=1e-12)


def test_filter_noiseless_chain_removes_nothing():
    chain = _synthetic_closed_chain()
    out = filter_matches_closed_chain(chain, loop_tol=0.05)
    assert loop_residual(out) <= 0.05
    for link in out.links:
        assert link.matches.valid.all()


def _inject_outliers(chain, frac=0.3, seed=9):
    """Replace a fraction of each link's targets with random positions."""
    rng = np.random.default_rng(seed)
    masks = []
    for link in chain.links:
        n = len(link.matches)
        n_out = int(frac * n)
        idx = rng.choice(n, size=n_out, replace=False)
        link.matches.dst[idx] = rng.uniform(20, 300, (n_out, 2))
        mask = np.zeros(n, dtype=bool)
        mask[idx] = True
        masks.append(mask)
    return masks


def test_filter_rejects_injected_outliers():
    chain = _synthetic_closed_chain(seed=3)
    outlier_masks = _inject_outliers(chain)
    out = filter_matches_closed_chain(chain, loop_tol=0.05)
    assert loop_residual(out) <= 0.05
    removed_out = removed_in = total_out = total_in = 0
    for link, mask in zip(out.links, outlier_masks):
        removed = ~link.matches.valid
        removed_out += int((removed & mask).sum())
        removed_in += int((removed & ~mask).sum())
        total_out += int(mask.sum())
        total_in += int((~mask).sum())
    assert removed_out >= 0.9 * total_out
    assert removed_in <= 0.05 * total_in


def test_filter_never_returns_worse_residual():
    for seed in (5, 11, 23):
        chain = _synthetic_closed_chain(seed=seed)
        _inject_outliers(chain, seed=seed + 50)
        # residual of the refit-but-unfiltered chain is the baseline
        from endomosaic.chain import _refit
        baseline = chain.copy()
        for link in baseline.links:
            link.h = _refit(link.matches)
        before = loop_residual(baseline)
        out = filter_matches_closed_chain(chain, loop_tol=0.05)
        assert loop_residual(out) <= before + 1e-12


def test_filter_improves_per_link_consistency():
    chain = _synthetic_closed_chain(seed=5)
    rng = np.random.default_rng(11)
    for link in chain.links:
        idx = rng.choice(len(link.matches), size=10, replace=False)
        link.matches.dst[idx] = rng.uniform(20, 300, (10, 2))

    pre = []
    for link in chain.links:
        src, dst = link.matches.valid_pairs()
        pre.append(np.median(symmetric_transfer_error(link.h, src, dst)))
    out = filter_matches_closed_chain(chain, loop_tol=0.05)
    for link, before in zip(out.links, pre):
        src, dst = link.matches.valid_pairs()
        after = np.median(symmetric_transfer_error(link.h, src, dst))
        assert after <= before + 1e-9


def test_filter_is_idempotent_after_convergence():
    chain = _synthetic_closed_chain(seed=7)
    _inject_outliers(chain, frac=0.2, seed=13)
    once = filter_matches_closed_chain(chain, loop_tol=0.05)
    assert loop_residual(once) <= 0.05
    twice = filter_matches_closed_chain(once, loop_tol=0.05)
    for a, b in zip(once.links, twice.links):
        assert np.array_equal(a.matches.valid, b.matches.valid)


def test_link_below_minimum_raises():
    chain = _identity_chain(n=3, matches_per_link=7)
    with pytest.raises(InsufficientMatches):
        filter_matches_closed_chain(chain)
