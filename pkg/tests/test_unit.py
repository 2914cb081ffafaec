"""Gate unit behavior: forward formula, degeneracy, statistics."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ptu.errors import ConfigError, ContractError
from ptu.tensor import Tape, Tensor, backward, finite_difference_check, grad_for, sum_all, mul
from ptu.unit import (
    GATE_HIST_BINS, GateStats, PtuOutput, PtuParams, collect_gate_stats,
    gate_statistics, ptu_forward, ptu_init, read_gate_stats_csv,
    write_gate_stats_csv,
)


def params_for(dim, seed=0, scale=0.1, phi="tanh"):
    return ptu_init(dim, phi=phi, rng_seed=seed, scale=scale)


def pair(dim, seed=1):
    rng = np.random.default_rng(seed)
    return (Tensor(rng.standard_normal((3, dim))),
            Tensor(rng.standard_normal((3, dim))))


# ---------------------------------------------------------------------------
# construction

def test_init_deterministic_and_in_range():
    a, b = params_for(4, seed=7), params_for(4, seed=7)
    for wa, wb in zip(a.arrays().values(), b.arrays().values()):
        np.testing.assert_array_equal(wa, wb)
        assert np.all(np.abs(wa) <= 0.1)


def test_init_weight_shapes():
    p = params_for(5)
    assert p.w_r.shape == (10, 5)
    assert p.w_z.shape == (10, 5)
    assert p.w_h.shape == (5, 5)
    assert p.dim == 5


def test_init_rejects_bad_dim_and_phi():
    with pytest.raises(ConfigError):
        ptu_init(0, phi="tanh", rng_seed=0)
    with pytest.raises(ConfigError):
        ptu_init(4, phi="sigmoid", rng_seed=0)


def test_params_validate_shapes():
    good = params_for(3)
    with pytest.raises(ConfigError):
        PtuParams(w_r=good.w_r[:5], w_z=good.w_z, w_h=good.w_h, phi="tanh")
    with pytest.raises(ConfigError):
        PtuParams(w_r=good.w_r, w_z=good.w_z, w_h=np.zeros((3, 4), np.float32), phi="tanh")


def test_zero_scale_gives_half_gates():
    p = params_for(4, scale=0.0)
    h_s, h_t = pair(4)
    out = ptu_forward(p, h_s, h_t)
    np.testing.assert_array_equal(out.r_gate.data, np.full((3, 4), 0.5))
    np.testing.assert_array_equal(out.z_gate.data, np.full((3, 4), 0.5))


# ---------------------------------------------------------------------------
# forward formula

def straight_line_reference(p, hs, ht):
    # independent reimplementation of the gate equations, no shared code
    cat = np.concatenate([hs, ht], axis=1)
    r = 1.0 / (1.0 + np.exp(-(cat @ p.w_r)))
    z = 1.0 / (1.0 + np.exp(-(cat @ p.w_z)))
    transformed = hs @ p.w_h
    phi = np.tanh(transformed) if p.phi == "tanh" else np.maximum(transformed, 0.0)
    adapted = (1.0 - r) * hs + r * phi
    return (1.0 - z) * ht + z * adapted, r, z, adapted


def test_forward_matches_straight_line_oracle():
    p = params_for(4, seed=3)
    h_s, h_t = pair(4, seed=9)
    out = ptu_forward(p, h_s, h_t)
    combined, r, z, adapted = straight_line_reference(p, h_s.data, h_t.data)
    np.testing.assert_allclose(out.combined.data, combined, atol=1e-6)
    np.testing.assert_allclose(out.r_gate.data, r, atol=1e-6)
    np.testing.assert_allclose(out.z_gate.data, z, atol=1e-6)
    np.testing.assert_allclose(out.adapted.data, adapted, atol=1e-6)


def test_forward_relu_phi_matches_oracle():
    p = params_for(6, seed=4, phi="relu")
    h_s, h_t = pair(6, seed=10)
    out = ptu_forward(p, h_s, h_t)
    combined, *_ = straight_line_reference(p, h_s.data, h_t.data)
    np.testing.assert_allclose(out.combined.data, combined, atol=1e-6)


def test_output_shape_matches_target():
    h_s, h_t = pair(4)
    out = ptu_forward(params_for(4), h_s, h_t)
    assert out.combined.shape == h_t.shape


def test_gate_values_strictly_inside_unit_interval():
    h_s, h_t = pair(8, seed=2)
    out = ptu_forward(params_for(8, seed=5), h_s, h_t)
    for gate in (out.r_gate.data, out.z_gate.data):
        assert np.all((gate > 0.0) & (gate < 1.0))


def test_dim_mismatch_names_layer_index():
    h_s, _ = pair(4)
    _, h_t = pair(6)
    with pytest.raises(ConfigError, match="junction 2"):
        ptu_forward(params_for(4), h_s, h_t, layer_index=2)


# ---------------------------------------------------------------------------
# degeneracy

def test_force_z_zero_copies_target_exactly():
    h_s, h_t = pair(5, seed=11)
    out = ptu_forward(params_for(5, seed=1), h_s, h_t, force_z=0.0)
    np.testing.assert_array_equal(out.combined.data, h_t.data)


def test_force_z_one_r_zero_copies_source_exactly():
    h_s, h_t = pair(5, seed=12)
    out = ptu_forward(params_for(5, seed=1), h_s, h_t, force_z=1.0, force_r=0.0)
    np.testing.assert_array_equal(out.combined.data, h_s.data)


def test_force_z_one_r_one_is_pure_transform_path():
    p = params_for(5, seed=1)
    h_s, h_t = pair(5, seed=13)
    out = ptu_forward(p, h_s, h_t, force_z=1.0, force_r=1.0)
    np.testing.assert_allclose(out.combined.data, np.tanh(h_s.data @ p.w_h), atol=1e-7)


@given(dim=st.integers(1, 8), seed=st.integers(0, 50))
@settings(max_examples=30, deadline=None)
def test_convexity_hull(dim, seed):
    p = params_for(dim, seed=seed)
    h_s, h_t = pair(dim, seed=seed + 100)
    out = ptu_forward(p, h_s, h_t)
    transformed = h_s.data @ p.w_h
    phi = np.tanh(transformed)
    lo = np.minimum(np.minimum(h_s.data, h_t.data), phi)
    hi = np.maximum(np.maximum(h_s.data, h_t.data), phi)
    assert np.all(out.combined.data >= lo - 1e-6)
    assert np.all(out.combined.data <= hi + 1e-6)


# ---------------------------------------------------------------------------
# gradients

def test_gradients_flow_to_all_three_weights():
    dim = 4
    rng = np.random.default_rng(8)
    hs_data = rng.standard_normal((2, dim))
    ht_data = rng.standard_normal((2, dim))

    def run(w_r, w_z, w_h):
        tape = Tape()
        tw = {"w_r": tape.watch(w_r), "w_z": tape.watch(w_z), "w_h": tape.watch(w_h)}
        p = params_for(dim, seed=2)
        out = ptu_forward(p, Tensor(hs_data), tape.watch(Tensor(ht_data)),
                          w_r=tw["w_r"], w_z=tw["w_z"], w_h=tw["w_h"])
        loss = sum_all(mul(out.combined, out.combined))
        grads = backward(tape, loss)
        return {k: grad_for(grads, v) for k, v in tw.items()}

    base = params_for(dim, seed=2)
    got = run(Tensor(base.w_r), Tensor(base.w_z), Tensor(base.w_h))
    for key in ("w_r", "w_z", "w_h"):
        assert np.any(got[key] != 0.0), key


def test_finite_difference_on_gate_weights():
    dim = 4
    rng = np.random.default_rng(21)
    hs = Tensor(rng.standard_normal((2, dim)), dtype=np.float64)
    ht = Tensor(rng.standard_normal((2, dim)), dtype=np.float64)
    base = params_for(dim, seed=6)

    for key in ("w_r", "w_z", "w_h"):
        def f(w, key=key):
            kw = {"w_r": None, "w_z": None, "w_h": None}
            kw[key] = w
            out = ptu_forward(base, hs, ht, **{k: v for k, v in kw.items() if v is not None})
            return sum_all(mul(out.combined, out.combined))

        w0 = Tensor(getattr(base, key).astype(np.float64), dtype=np.float64)
        assert finite_difference_check(f, w0) < 1e-3, key


# ---------------------------------------------------------------------------
# gate statistics

def forced_output(dim, r_value, z_value, layer_index=0, batch=2):
    h_s, h_t = pair(dim, seed=3)
    return ptu_forward(params_for(dim), h_s, h_t,
                       force_r=r_value, force_z=z_value, layer_index=layer_index)


def test_stats_on_forced_half_gates():
    stats = gate_statistics([forced_output(4, 0.5, 0.5)], layer_index=0)
    assert stats.mean_r == pytest.approx(0.5)
    assert stats.mean_z == pytest.approx(0.5)


def test_stats_quarter_three_quarter():
    out = PtuOutput(combined=Tensor(np.zeros((1, 2))),
                    r_gate=Tensor(np.array([[0.25, 0.75]])),
                    z_gate=Tensor(np.array([[0.5, 0.5]])),
                    adapted=Tensor(np.zeros((1, 2))), layer_index=0)
    stats = gate_statistics([out], layer_index=0)
    assert stats.mean_r == pytest.approx(0.5)
    assert sum(1 for c in stats.histogram_r if c > 0) == 2
    assert sum(stats.histogram_r) == 2


def test_stats_histogram_counts_and_weighted_mean():
    rng = np.random.default_rng(9)
    gates = rng.uniform(0.01, 0.99, size=(4, 6))
    out = PtuOutput(combined=Tensor(np.zeros((4, 6))), r_gate=Tensor(gates),
                    z_gate=Tensor(gates), adapted=Tensor(np.zeros((4, 6))),
                    layer_index=1)
    stats = gate_statistics([out], layer_index=1)
    assert sum(stats.histogram_r) == gates.size
    centers = (np.arange(GATE_HIST_BINS) + 0.5) / GATE_HIST_BINS
    approx = float(np.dot(stats.histogram_r, centers)) / gates.size
    assert abs(approx - stats.mean_r) <= 0.5 / GATE_HIST_BINS


def test_stats_order_invariant():
    a = forced_output(3, 0.2, 0.9)
    b = forced_output(3, 0.7, 0.1)
    s1 = gate_statistics([a, b], layer_index=0)
    s2 = gate_statistics([b, a], layer_index=0)
    assert s1.mean_r == pytest.approx(s2.mean_r)
    assert s1.histogram_z == s2.histogram_z


def test_stats_empty_list_rejected():
    with pytest.raises(ContractError):
        gate_statistics([], layer_index=0)


def test_stats_layer_mismatch_rejected():
    with pytest.raises(ContractError):
        gate_statistics([forced_output(3, 0.5, 0.5, layer_index=1)], layer_index=0)


def test_collect_groups_by_layer():
    outs = [forced_output(3, 0.5, 0.5, layer_index=0),
            forced_output(3, 0.5, 0.5, layer_index=1),
            forced_output(3, 0.5, 0.5, layer_index=0)]
    stats = collect_gate_stats(outs)
    assert [s.layer_index for s in stats] == [0, 1]
    assert sum(stats[0].histogram_r) == 2 * 3 * 3  # two outputs of batch 3, dim 3


def test_stats_csv_round_trip(tmp_path):
    stats = [gate_statistics([forced_output(4, 0.3, 0.8, layer_index=i)], layer_index=i)
             for i in range(2)]
    path = tmp_path / "gates.csv"
    write_gate_stats_csv(stats, path)
    header = path.read_text().splitlines()[0]
    assert header.startswith("layer,mean_r,mean_z,bin0_r")
    assert header.endswith("bin9_z")
    loaded = read_gate_stats_csv(path)
    for a, b in zip(stats, loaded):
        assert a.layer_index == b.layer_index
        assert a.mean_r == pytest.approx(b.mean_r, abs=1e-6)
        assert a.histogram_r == b.histogram_r
        assert a.histogram_z == b.histogram_z
