import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from triplane_grasp.gaussians import (SH_C0, DecoderWeights, GaussianSet, decode_gaussian, decode_gaussians,
                                      decode_gradients, decode_raw, evaluate_sh, load_decoder, load_gaussians_ply,
                                      map_raw, raw_output_dim, save_decoder, save_gaussians_ply, sh_basis)


def unit_dirs(n, seed):
    d = np.random.default_rng(seed).normal(size=(n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def fd_relative_error(analytic, numeric, floor=1e-6):
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)))


def finite_difference_check(weights, x, f, h=1e-5):
    """Largest relative error over input, weight and bias derivatives."""
    jac = decode_gradients(weights, x, f)
    inp = np.concatenate([x, f])
    worst = 0.0

    def raw_at(ws, bs, v):
        return decode_raw(DecoderWeights(ws, bs, weights.activations, weights.sh_degree), v[:3], v[3:])[0]

    ws, bs = list(weights.weights), list(weights.biases)
    num = np.empty_like(jac.d_input)
    for k in range(len(inp)):
        e = np.zeros_like(inp)
        e[k] = h
        num[:, k] = (raw_at(ws, bs, inp + e) - raw_at(ws, bs, inp - e)) / (2 * h)
    worst = max(worst, fd_relative_error(jac.d_input, num))
    for layer in range(len(ws)):
        for target, grads in ((ws, jac.d_weights), (bs, jac.d_biases)):
            base = target[layer]
            num = np.empty_like(grads[layer])
            for idx in np.ndindex(base.shape):
                plus, minus = base.copy(), base.copy()
                plus[idx] += h
                minus[idx] -= h
                target[layer] = plus
                hi = raw_at(tuple(ws), tuple(bs), inp)
                target[layer] = minus
                lo = raw_at(tuple(ws), tuple(bs), inp)
                num[(slice(None),) + idx] = (hi - lo) / (2 * h)
            target[layer] = base
            worst = max(worst, fd_relative_error(grads[layer], num))
    return worst


# ---------------------------------------------------------------- SH

def test_sh_matches_scipy_table_degree2():
    rng = np.random.default_rng(0)
    dirs = unit_dirs(50, 1)
    coef = rng.normal(scale=0.2, size=(9, 3))
    basis = oracles.real_sh_scipy(dirs, 2)
    assert np.max(np.abs(sh_basis(dirs, 2) - basis)) <= 1e-10
    want = np.clip(basis @ coef + 0.5, 0, 1)
    got = np.array([evaluate_sh(coef, 2, d) for d in dirs])
    assert np.max(np.abs(got - want)) <= 1e-10


def test_sh_constant_band_closed_form():
    c = np.array([0.3, -0.2, 1.0])
    for d in unit_dirs(20, 2):
        assert np.allclose(evaluate_sh(c, 0, d), np.clip(c * 0.28209479177 + 0.5, 0, 1), atol=1e-11)
    assert SH_C0 == pytest.approx(0.28209479177, abs=1e-11)


def test_sh_odd_band_symmetry():
    sh = np.zeros((4, 3))
    sh[2] = [0.1, 0.2, -0.3]  # z-linear band
    up = evaluate_sh(sh, 1, [0, 0, 1.0])
    down = evaluate_sh(sh, 1, [0, 0, -1.0])
    assert np.allclose(up - down, 2 * 0.4886025119029199 * sh[2], atol=1e-15)


def test_sh_length_mismatch_rejected():
    with pytest.raises(ValueError):
        evaluate_sh(np.zeros(5), 1, [0, 0, 1.0])
    with pytest.raises(ValueError):
        sh_basis([[0, 0, 1.0]], 3)


# ---------------------------------------------------------------- decoder

def test_zero_network_forced_outputs():
    w = DecoderWeights.zeros(feature_dim=6, max_scale=2.0)
    x = np.array([0.1, -0.2, 0.3])
    s = decode_gaussian(w, x, np.ones(6))
    assert np.array_equal(s.position, x)
    assert s.opacity == 0.5
    assert np.array_equal(s.scale, np.ones(3))
    assert np.array_equal(s.rotation.quat, [1.0, 0, 0, 0])
    assert np.all(s.sh == 0)


def test_forward_matches_loop_oracle():
    w = DecoderWeights.random(feature_dim=9, hidden=(16, 12), sh_degree=1, seed=3, activation="tanh")
    rng = np.random.default_rng(4)
    xs, fs = rng.normal(size=(5, 3)), rng.normal(size=(5, 9))
    raw = decode_raw(w, xs, fs)
    for i in range(5):
        want = oracles.mlp_forward_loops(w.weights, w.biases, w.activations, np.r_[xs[i], fs[i]])
        assert np.max(np.abs(raw[i] - want)) <= 1e-12


def test_decode_is_deterministic_and_batch_invariant():
    w = DecoderWeights.random(feature_dim=12, seed=1)
    rng = np.random.default_rng(2)
    xs, fs = rng.normal(size=(40, 3)), rng.normal(size=(40, 12))
    a = decode_gaussians(w, xs, fs)
    b = decode_gaussians(w, xs, fs)
    assert np.array_equal(a.positions, b.positions) and np.array_equal(a.sh, b.sh)
    perm = rng.permutation(40)
    c = decode_gaussians(w, xs[perm], fs[perm])
    assert np.array_equal(c.sh, a.sh[perm]) and np.array_equal(c.scales, a.scales[perm])
    single = decode_gaussian(w, xs[7], fs[7])
    assert np.array_equal(single.sh, a.sh[7])


def test_dimension_and_finiteness_errors():
    w = DecoderWeights.random(feature_dim=4, seed=0)
    with pytest.raises(ValueError):
        decode_gaussians(w, np.zeros((2, 3)), np.zeros((2, 5)))
    with pytest.raises(FloatingPointError, match="layer"):
        decode_gaussians(w, np.full((1, 3), 1e308), np.full((1, 4), 1e308))
    with pytest.raises(ValueError):
        DecoderWeights((np.zeros((4, 7)),), (np.zeros(4),), ("linear",))
    with pytest.raises(ValueError):
        DecoderWeights((np.zeros((raw_output_dim(1), 7)),), (np.zeros(raw_output_dim(1)),), ("gelu",))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 50))
def test_decoded_splats_always_valid(seed, magnitude):
    rng = np.random.default_rng(seed)
    w = DecoderWeights.random(feature_dim=5, hidden=(8,), seed=seed % 1000, max_scale=0.5)
    xs, fs = magnitude * rng.normal(size=(20, 3)), magnitude * rng.normal(size=(20, 5))
    gs = decode_gaussians(w, xs, fs)
    assert np.all((gs.opacities >= 0) & (gs.opacities <= 1))
    assert np.all((gs.scales >= 1e-6) & (gs.scales <= 0.5))
    assert np.allclose(np.linalg.norm(gs.rotations, axis=1), 1.0)
    # subtraction at large |x| costs a few ulps
    assert np.all(np.abs(gs.positions - xs) <= w.max_offset + 4 * np.spacing(np.abs(xs)))


def test_zero_quaternion_maps_to_identity():
    w = DecoderWeights.zeros(feature_dim=1)
    raw = np.zeros((1, raw_output_dim(1)))
    raw[0, 7:11] = 1e-14
    assert np.array_equal(map_raw(w, np.zeros((1, 3)), raw).rotations[0], [1.0, 0, 0, 0])


def test_lipschitz_bound_in_features():
    w = DecoderWeights.random(feature_dim=6, hidden=(16, 16), seed=5)
    bound = np.prod([np.linalg.norm(m, 2) for m in w.weights])
    rng = np.random.default_rng(6)
    for _ in range(20):
        x, f = rng.normal(size=3), rng.normal(size=6)
        df = rng.normal(size=6) * 1e-3
        delta = decode_raw(w, x, f + df) - decode_raw(w, x, f)
        assert np.linalg.norm(delta) <= bound * np.linalg.norm(df) * (1 + 1e-9)


def test_jacobian_zero_weights_and_linear_layer():
    w = DecoderWeights.zeros(feature_dim=2)
    jac = decode_gradients(w, np.zeros(3), np.zeros(2))
    assert np.array_equal(jac.d_biases[-1], np.eye(w.output_dim))
    rng = np.random.default_rng(7)
    out = raw_output_dim(0)
    lin = DecoderWeights((rng.normal(size=(out, 5)),), (rng.normal(size=out),), ("linear",), sh_degree=0)
    x, f = rng.normal(size=3), rng.normal(size=2)
    jac = decode_gradients(lin, x, f)
    inp = np.r_[x, f]
    for o in range(out):
        want = np.zeros((out, 5))
        want[o] = inp
        assert np.array_equal(jac.d_weights[0][o], want)
    assert np.array_equal(jac.d_input, lin.weights[0])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_jacobian_matches_central_differences(seed):
    w = DecoderWeights.random(feature_dim=6, hidden=(8, 8), sh_degree=1, seed=seed)
    rng = np.random.default_rng(100 + seed)
    for _ in range(10):
        err = finite_difference_check(w, rng.normal(size=3), rng.normal(size=6))
        assert err <= 1e-4


# ---------------------------------------------------------------- files

def test_decoder_file_roundtrip(tmp_path):
    w = DecoderWeights.random(feature_dim=4, hidden=(5,), seed=9, max_offset=0.02, max_scale=0.3)
    save_decoder(w, tmp_path / "dec.json")
    back = load_decoder(tmp_path / "dec.json")
    assert back.layer_sizes == w.layer_sizes and back.activations == w.activations
    assert back.max_offset == 0.02 and back.max_scale == 0.3
    for a, b in zip(back.weights, w.weights):
        assert np.array_equal(a, b.astype(np.float32))
    (tmp_path / "dec.bin").write_bytes((tmp_path / "dec.bin").read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_decoder(tmp_path / "dec.json")


@pytest.mark.parametrize("degree", [0, 1, 2])
def test_gaussian_ply_roundtrip(tmp_path, degree):
    rng = np.random.default_rng(degree)
    m = 30
    q = rng.normal(size=(m, 4))
    gs = GaussianSet(rng.normal(size=(m, 3)), rng.uniform(0.01, 0.99, m), rng.uniform(0.001, 0.1, (m, 3)),
                     q / np.linalg.norm(q, axis=1, keepdims=True), rng.normal(size=(m, (degree + 1) ** 2, 3)), degree)
    save_gaussians_ply(gs, tmp_path / "g.ply")
    back = load_gaussians_ply(tmp_path / "g.ply")
    assert back.sh_degree == degree and len(back) == m
    assert np.allclose(back.positions, gs.positions, atol=1e-6)
    assert np.allclose(back.sh, gs.sh, atol=1e-6)
    assert np.allclose(back.opacities, gs.opacities, atol=1e-6)
    assert np.allclose(back.scales, gs.scales, rtol=1e-6)
    assert np.allclose(back.rotations, gs.rotations, atol=1e-6)
