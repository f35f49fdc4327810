import itertools

import numpy as np
import pytest

from ctdenoise.errors import ValidationError, ZeroProbabilityError
from ctdenoise.scm import (
    DiscreteSCM,
    causal_transition,
    do_Y,
    joint,
    random_common_cause_scm,
    random_scm,
    random_theorem1_violator,
    random_theorem2_violator,
    scm_from_json,
    scm_to_json,
    verify_theorem1,
    verify_theorem2,
)

# ---------------------------------------------------------------------------
# Independent oracle: plain-python enumeration over assignments, written
# without reference to the module's einsum/marginalization code.


def brute_force_joint(scm):
    """Dict mapping (z, x2, x1, y, yhat) -> probability, via explicit loops."""
    sz = scm.sizes
    table = {}
    for z in range(sz["Z"]):
        for s in range(sz["X2"]):
            for o in range(sz["X1"]):
                for y in range(sz["Y"]):
                    if scm.cpt_y_given_x1.ndim == 2:
                        p_y = scm.cpt_y_given_x1[o][y]
                    else:
                        p_y = scm.cpt_y_given_x1[o][z][y]
                    for h in range(sz["Yhat"]):
                        if scm.cpt_yhat_given_y_x2_z.ndim == 4:
                            p_h = scm.cpt_yhat_given_y_x2_z[y][s][z][h]
                        else:
                            p_h = scm.cpt_yhat_given_y_x2_z[o][y][s][z][h]
                        table[(z, s, o, y, h)] = (
                            scm.cpt_z[z]
                            * scm.cpt_x2_given_z[z][s]
                            * scm.cpt_x1_given_x2[s][o]
                            * p_y
                            * p_h
                        )
    return table


def brute_force_causal_transition(scm, x1, x2):
    """Row y: condition the do(Y=y) enumeration on (x1, x2)."""
    sz = scm.sizes
    rows = np.zeros((sz["Y"], sz["Yhat"]))
    for y_do in range(sz["Y"]):
        num = np.zeros(sz["Yhat"])
        den = 0.0
        for z in range(sz["Z"]):
            base = scm.cpt_z[z] * scm.cpt_x2_given_z[z][x2] * scm.cpt_x1_given_x2[x2][x1]
            den += base
            for h in range(sz["Yhat"]):
                if scm.cpt_yhat_given_y_x2_z.ndim == 4:
                    num[h] += base * scm.cpt_yhat_given_y_x2_z[y_do][x2][z][h]
                else:
                    num[h] += base * scm.cpt_yhat_given_y_x2_z[x1][y_do][x2][z][h]
        rows[y_do] = num / den
    return rows


SIZES = (3, 3, 3, 3, 3)


class TestJoint:
    def test_deterministic_cpts_single_cell(self):
        scm = DiscreteSCM(
            cpt_z=np.array([1.0, 0.0]),
            cpt_x2_given_z=np.array([[0.0, 1.0], [1.0, 0.0]]),
            cpt_x1_given_x2=np.array([[1.0, 0.0], [0.0, 1.0]]),
            cpt_y_given_x1=np.array([[0.0, 1.0], [1.0, 0.0]]),
            cpt_yhat_given_y_x2_z=np.tile(np.array([1.0, 0.0]), (2, 2, 2, 1)),
        )
        table = joint(scm).probs
        assert table.max() == 1.0
        assert np.count_nonzero(table) == 1
        # Z=0 -> X2=1 -> X1=1 -> Y=0 -> Yhat=0
        assert table[0, 1, 1, 0, 0] == 1.0

    def test_all_uniform_cells(self):
        u2 = np.full(2, 0.5)
        scm = DiscreteSCM(
            cpt_z=u2,
            cpt_x2_given_z=np.full((2, 2), 0.5),
            cpt_x1_given_x2=np.full((2, 2), 0.5),
            cpt_y_given_x1=np.full((2, 2), 0.5),
            cpt_yhat_given_y_x2_z=np.full((2, 2, 2, 2), 0.5),
        )
        assert np.allclose(joint(scm).probs, 1 / 32)

    def test_marginal_matches_hand_rolled_summation(self):
        scm = random_scm(SIZES, seed=13)
        y_marginal = joint(scm).marginal("Y")
        oracle = brute_force_joint(scm)
        expect = np.zeros(3)
        for (z, s, o, y, h), p in oracle.items():
            expect[y] += p
        assert np.abs(y_marginal - expect).max() < 1e-14

    @pytest.mark.parametrize("seed", range(10))
    def test_total_mass_one(self, seed):
        assert abs(joint(random_scm(SIZES, seed)).total_mass - 1.0) < 1e-12


class TestDoY:
    def test_point_mass_marginal(self):
        scm = random_scm(SIZES, seed=1)
        for y in range(3):
            marg = joint(do_Y(scm, y)).marginal("Y")
            expect = np.zeros(3)
            expect[y] = 1.0
            assert np.allclose(marg, expect)

    def test_upstream_untouched(self):
        scm = random_scm(SIZES, seed=2)
        before = joint(scm).probs.sum(axis=(3, 4))  # P(Z, X2, X1)
        after = joint(do_Y(scm, 1)).probs.sum(axis=(3, 4))
        assert np.abs(before - after).max() < 1e-14

    def test_idempotent(self):
        scm = random_scm(SIZES, seed=3)
        once = do_Y(scm, 2)
        twice = do_Y(once, 2)
        assert np.array_equal(once.cpt_y_given_x1, twice.cpt_y_given_x1)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            do_Y(random_scm(SIZES, seed=4), 3)


class TestCausalTransition:
    def test_identity_yhat_cpt(self):
        scm = random_scm((2, 2, 2, 2, 2), seed=0)
        ident = np.zeros((2, 2, 2, 2))
        for y in range(2):
            ident[y, :, :, y] = 1.0
        scm = DiscreteSCM(
            cpt_z=scm.cpt_z,
            cpt_x2_given_z=scm.cpt_x2_given_z,
            cpt_x1_given_x2=scm.cpt_x1_given_x2,
            cpt_y_given_x1=scm.cpt_y_given_x1,
            cpt_yhat_given_y_x2_z=ident,
        )
        for x1 in range(2):
            for x2 in range(2):
                assert np.allclose(causal_transition(scm, x1, x2), np.eye(2))

    def test_uniform_yhat_cpt(self):
        scm = random_scm((2, 2, 2, 3, 4), seed=1)
        uniform = np.full((3, 2, 2, 4), 0.25)
        scm = DiscreteSCM(
            cpt_z=scm.cpt_z,
            cpt_x2_given_z=scm.cpt_x2_given_z,
            cpt_x1_given_x2=scm.cpt_x1_given_x2,
            cpt_y_given_x1=scm.cpt_y_given_x1,
            cpt_yhat_given_y_x2_z=uniform,
        )
        assert np.allclose(causal_transition(scm, 0, 1), 0.25)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_independent_enumeration(self, seed):
        # acceptance criterion: oracle equivalence at 1e-12 on 50 seeded SCMs
        rng = np.random.default_rng(seed)
        sizes = tuple(rng.integers(2, 5, size=5))
        scm = random_scm(sizes, seed)
        x1 = int(rng.integers(0, sizes[2]))
        x2 = int(rng.integers(0, sizes[1]))
        got = causal_transition(scm, x1, x2)
        expect = brute_force_causal_transition(scm, x1, x2)
        assert np.abs(got - expect).max() < 1e-12

    def test_zero_probability_conditioning(self):
        scm = random_scm((2, 2, 2, 2, 2), seed=5)
        blocked = DiscreteSCM(
            cpt_z=scm.cpt_z,
            cpt_x2_given_z=np.array([[1.0, 0.0], [1.0, 0.0]]),  # X2=1 unreachable
            cpt_x1_given_x2=scm.cpt_x1_given_x2,
            cpt_y_given_x1=scm.cpt_y_given_x1,
            cpt_yhat_given_y_x2_z=scm.cpt_yhat_given_y_x2_z,
        )
        with pytest.raises(ZeroProbabilityError):
            causal_transition(blocked, 0, 1)


class TestTheorems:
    @pytest.mark.parametrize("seed", range(20))
    def test_conforming_scms_pass(self, seed):
        scm = random_scm(SIZES, seed)
        r1 = verify_theorem1(scm, 1e-10)
        r2 = verify_theorem2(scm, 1e-10)
        assert r1.ok and r1.max_error < 1e-12
        assert r2.ok and r2.max_error < 1e-12

    def test_deterministic_cpts_error_exactly_zero(self):
        eye2 = np.eye(2)
        scm = DiscreteSCM(
            cpt_z=np.array([0.5, 0.5]),
            cpt_x2_given_z=eye2.copy(),
            cpt_x1_given_x2=eye2.copy(),
            cpt_y_given_x1=eye2.copy(),
            cpt_yhat_given_y_x2_z=np.tile(eye2[:, None, None, :], (1, 2, 2, 1)),
        )
        assert verify_theorem1(scm, 0.0).max_error == 0.0
        assert verify_theorem2(scm, 0.0).max_error == 0.0

    @pytest.mark.parametrize("seed", range(10))
    def test_adversarial_rejected(self, seed):
        v1 = verify_theorem1(random_theorem1_violator(SIZES, seed), 1e-10)
        assert not v1.ok and v1.max_error > 0.01
        v2 = verify_theorem2(random_theorem2_violator(SIZES, seed), 1e-10)
        assert not v2.ok and v2.max_error > 0.01

    def test_violator_cross_effects(self):
        # Yhat is a sink, so the extra Yhat <- X1 edge cannot disturb the
        # backdoor identity; a Y <- Z edge, by contrast, opens Y-Z-Yhat given
        # X2 and breaks both identities.
        v1 = random_theorem1_violator(SIZES, 0)
        assert verify_theorem2(v1, 1e-10).ok
        v2 = random_theorem2_violator(SIZES, 0)
        assert not verify_theorem1(v2, 1e-10).ok

    def test_theorem1_corollary_interventional_equals_observational_rows(self):
        scm = random_scm(SIZES, seed=8)
        obs = joint(scm).probs
        ct = causal_transition(scm, 1, 2)
        for y in range(3):
            sub = obs[:, 2, :, y, :].sum(axis=(0, 1))
            assert np.abs(ct[y] - sub / sub.sum()).max() < 1e-12

    def test_common_cause_variant_breaks_theorem1_not_theorem2(self):
        cc = random_common_cause_scm(SIZES, seed=7)
        assert abs(cc.joint().total_mass - 1.0) < 1e-12
        r1 = verify_theorem1(cc, 1e-10)
        r2 = verify_theorem2(cc, 1e-10)
        assert not r1.ok and r1.max_error > 0.01
        assert r2.ok


class TestRandomScm:
    def test_same_seed_identical(self):
        a = random_scm(SIZES, 9)
        b = random_scm(SIZES, 9)
        assert np.array_equal(a.cpt_yhat_given_y_x2_z, b.cpt_yhat_given_y_x2_z)

    def test_rows_on_simplex(self):
        scm = random_scm((4, 3, 2, 4, 3), 10)
        for cpt in (
            scm.cpt_x2_given_z,
            scm.cpt_x1_given_x2,
            scm.cpt_y_given_x1,
            scm.cpt_yhat_given_y_x2_z,
        ):
            assert np.abs(cpt.sum(axis=-1) - 1.0).max() < 1e-12

    def test_rejects_small_or_huge_supports(self):
        with pytest.raises(ValidationError):
            random_scm((1, 3, 3, 3, 3), 0)
        with pytest.raises(ValidationError):
            random_scm((3, 3, 3, 3, 17), 0)


def test_json_round_trip(tmp_path):
    scm = random_scm((2, 3, 2, 3, 2), 11)
    path = str(tmp_path / "scm.json")
    scm_to_json(scm, path)
    back = scm_from_json(path)
    for name in (
        "cpt_z",
        "cpt_x2_given_z",
        "cpt_x1_given_x2",
        "cpt_y_given_x1",
        "cpt_yhat_given_y_x2_z",
    ):
        assert np.array_equal(getattr(scm, name), getattr(back, name))
    assert verify_theorem1(back, 1e-10).ok
