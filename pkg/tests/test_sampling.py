import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmbm_coupler.errors import InsufficientChain, LengthMismatch
from mmbm_coupler.model import LevelSchedule, build_level, level_at, validate_params
from mmbm_coupler.sampling import (
    EpochLedger,
    PhaseSequence,
    assign_phases,
    sample_ledger,
    sample_phase_chain,
    sample_wh_increments,
    substream,
    write_ledger_csv,
)
from mmbm_coupler.stats import chi_square_transitions, ks_exponential, ks_two_sample

from conftest import TWO_PHASE, random_model


def scalar(mu, sigma, lam):
    params = validate_params({"Q": [[0.0]], "mu": [mu], "sigma": [sigma]})
    return params, LevelSchedule(0.0, values=(lam,))


def one_level_sample(params, sched, horizon, seed):
    rng = substream(seed, 0)
    ledger = sample_ledger(rng, sched, 0, horizon)
    x0 = sample_phase_chain(rng, params, build_level(params, sched, 0), int(np.sum(ledger.layers == 0)))
    phases = assign_phases(ledger, x0)
    return ledger, phases, sample_wh_increments(rng, build_level(params, sched, 0), phases, ledger)


def test_substream_is_reproducible_and_distinct():
    a = substream(7, 3).random(5)
    assert np.array_equal(a, substream(7, 3).random(5))
    assert not np.array_equal(a, substream(7, 4).random(5))
    assert not np.array_equal(a, substream(8, 3).random(5))


def test_zero_horizon_gives_empty_ledger():
    ledger = sample_ledger(substream(0, 0), LevelSchedule(2.0), 5, 0.0)
    assert len(ledger) == 0
    assert ledger.durations.size == 0


def test_negative_horizon_rejected():
    with pytest.raises(ValueError):
        sample_ledger(substream(0, 0), LevelSchedule(2.0), 1, -1.0)


def test_poisson_mean_count():
    sched = LevelSchedule(2.0)
    assert np.allclose(sched.layer_rates(3), [1.0, 0.0, 3.0, 5.0])
    horizon = 1.5
    counts = np.array([len(sample_ledger(substream(11, r), sched, 3, horizon)) for r in range(10_000)])
    se = counts.std(ddof=1) / np.sqrt(len(counts))
    assert abs(counts.mean() - 9.0 * horizon) <= 3 * se


def test_restriction_equals_merging_layers():
    sched = LevelSchedule(2.0)
    ledger = sample_ledger(substream(3, 0), sched, 4, 5.0)
    merged = np.sort(np.concatenate([ledger.epochs[ledger.layers == 0], ledger.epochs[ledger.layers == 1]]))
    assert np.array_equal(ledger.restrict(1).epochs, merged)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n_max=st.integers(0, 8), horizon=st.floats(0.0, 3.0))
def test_ledger_nesting_and_order(seed, n_max, horizon):
    ledger = sample_ledger(substream(seed, 0), LevelSchedule(2.0), n_max, horizon)
    assert np.all(np.diff(ledger.epochs) > 0)
    assert np.all((ledger.epochs > 0) & (ledger.epochs <= horizon))
    for n in range(n_max):
        assert np.all(np.isin(ledger.level_epochs(n), ledger.level_epochs(n + 1)))


def test_level_interarrivals_are_exponential():
    sched = LevelSchedule(2.0)
    ledger = sample_ledger(substream(5, 0), sched, 6, 400.0)
    for n in (1, 3, 6):
        gaps = np.diff(ledger.level_epochs(n), prepend=0.0)
        assert ks_exponential(gaps, sched.lam(n) / 2).passed


def test_chain_single_state_when_no_steps(two_phase):
    params, sched = two_phase
    x0 = sample_phase_chain(substream(0, 0), params, build_level(params, sched, 0), 0)
    assert x0.shape == (1,)


def test_chain_alternates_when_p0_is_a_flip(two_phase):
    params, sched = two_phase
    level0 = build_level(params, sched, 0)
    assert np.allclose(level0.P, [[0, 1], [1, 0]])
    x0 = sample_phase_chain(substream(1, 0), params, level0, 1000)
    assert np.all(np.diff(x0) != 0)


def test_chain_transitions_match_p0():
    params, _ = random_model(np.random.default_rng(4), m=3)
    level0 = level_at(params, 2.0 * np.max(np.abs(np.diag(params.Q))) * 1.5, 0)
    x0 = sample_phase_chain(substream(2, 0), params, level0, 100_000)
    assert chi_square_transitions(x0, level0.P).passed


def test_chain_initial_law():
    params = validate_params({**TWO_PHASE, "p": [0.2, 0.8]})
    level0 = level_at(params, 2.0, 0)
    first = [sample_phase_chain(substream(9, r), params, level0, 0)[0] for r in range(4000)]
    frac = np.mean(np.array(first) == 1)
    assert abs(frac - 0.8) < 3 * np.sqrt(0.16 / 4000)


def test_assign_phases_hand_example():
    ledger = EpochLedger(1.0, 1, np.array([0.2, 0.5, 0.9]), np.array([1, 0, 1]))
    ph = assign_phases(ledger, np.array([4, 7, 9]))
    assert ph.phase_at_epoch.tolist() == [4, 7, 7]
    assert ph.interval_phases.tolist() == [4, 4, 7]


def test_assign_phases_without_layer0_arrivals():
    ledger = EpochLedger(1.0, 2, np.array([0.1, 0.3, 0.6]), np.array([2, 1, 2]))
    assert assign_phases(ledger, np.array([3])).phase_at_epoch.tolist() == [3, 3, 3]


def test_assign_phases_needs_enough_chain():
    ledger = EpochLedger(1.0, 0, np.array([0.1, 0.3]), np.array([0, 0]))
    with pytest.raises(InsufficientChain):
        assign_phases(ledger, np.array([0, 1]))


def test_phase_invariant_under_refinement(two_phase):
    params, sched = two_phase
    rng = substream(12, 0)
    ledger = sample_ledger(rng, sched, 5, 20.0)
    x0 = sample_phase_chain(rng, params, build_level(params, sched, 0), int(np.sum(ledger.layers == 0)))
    fine = assign_phases(ledger, x0)
    for n in range(5):
        coarse = assign_phases(ledger.restrict(n), x0)
        assert np.array_equal(coarse.phase_at_epoch, fine.restrict(ledger.level_mask(n)).phase_at_epoch)
    # phase changes only at layer-0 epochs
    changed = np.flatnonzero(np.diff(np.concatenate([x0[:1], fine.phase_at_epoch])) != 0)
    assert np.all(ledger.layers[changed] == 0)


def test_increment_length_mismatch(two_phase):
    params, sched = two_phase
    ledger = EpochLedger(1.0, 0, np.array([0.1, 0.3]), np.array([1, 1]))
    with pytest.raises(LengthMismatch):
        sample_wh_increments(substream(0, 0), build_level(params, sched, 1), PhaseSequence(np.array([0]), np.array([0])), ledger)


def test_empty_increments(two_phase):
    params, sched = two_phase
    ledger = sample_ledger(substream(0, 0), sched, 2, 0.0)
    inc = sample_wh_increments(substream(0, 1), build_level(params, sched, 2), assign_phases(ledger, np.array([0])), ledger)
    assert inc.L.size == 0 and inc.H.size == 0


def test_symmetric_increments_share_a_law():
    params, sched = scalar(0.0, 1.0, 8.0)
    _, _, inc = one_level_sample(params, sched, 25_000.0, 21)
    assert len(inc.L) > 50_000
    assert ks_two_sample(inc.L, inc.H).passed


def test_increment_means_and_laws():
    params, sched = scalar(1.0, 1.0, 8.0)
    lv = build_level(params, sched, 0)
    assert (lv.omega[0], lv.eta[0]) == pytest.approx((4.0, 2.0))
    _, _, inc = one_level_sample(params, sched, 25_000.0, 22)
    se = inc.L.std(ddof=1) / np.sqrt(len(inc.L))
    assert abs(inc.L.mean() - 0.25) <= 3 * se
    assert ks_exponential(inc.L, 4.0).passed
    assert ks_exponential(inc.H, 2.0).passed
    assert ks_exponential(lv.omega[0] * inc.L / lv.lam, lv.lam).passed
    assert abs(np.corrcoef(inc.L, inc.H)[0, 1]) < 4 / np.sqrt(len(inc.L))


def test_increments_consistent_with_durations():
    # E[H - L | t] = mu t, so the regression of H - L on t has slope mu.
    params, sched = scalar(1.5, 0.7, 8.0)
    ledger, _, inc = one_level_sample(params, sched, 20_000.0, 23)
    t = ledger.durations
    slope = np.sum((inc.H - inc.L) * t) / np.sum(t * t)
    assert slope == pytest.approx(1.5, abs=0.05)
    assert np.all(inc.L >= 0) and np.all(inc.H >= 0)


def test_write_ledger_csv(tmp_path, two_phase):
    params, sched = two_phase
    ledger = EpochLedger(1.0, 1, np.array([0.2, 0.5]), np.array([1, 0]))
    ph = assign_phases(ledger, np.array([0, 1]))
    f = tmp_path / "ledger.csv"
    write_ledger_csv(f, ledger, ph, params.phases)
    assert f.read_text().splitlines() == ["epoch,layer,phase", "0.2,1,1", "0.5,0,2"]
