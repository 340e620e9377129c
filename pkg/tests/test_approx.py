import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fosp import approx
from fosp.approx import ApproximatorSpec, GruSpec


def _reference_forward(spec, flat, x):
    """Standalone numpy MLP (SiLU hidden layers) used as an independent check."""
    flat = np.asarray(flat)
    widths = spec.widths
    off = 0
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        W = flat[off:off + a * b].reshape(a, b)
        off += a * b
        bias = flat[off:off + b]
        off += b
        x = x @ W + bias
        if i < len(widths) - 2:
            x = x / (1 + np.exp(-x))
    return x


def test_zero_weights_give_zero_output():
    spec = ApproximatorSpec(3, 2, 2, 5)
    out = approx.forward(spec, jnp.zeros(spec.size), jnp.array([0.3, -1.0, 7.0]))
    np.testing.assert_array_equal(out, np.zeros(2))


def test_identity_linear_layer():
    # one hidden layer of SiLU cannot be the identity, so check the linear map
    # of the final layer on the hidden activations instead
    spec = ApproximatorSpec(2, 2, 1, 2)
    p = approx.unpack(spec, jnp.zeros(spec.size))
    flat = jnp.zeros(spec.size)
    seg = {s.name: s for s in spec.layout}
    flat = flat.at[seg["layer0.weight"].offset:seg["layer0.weight"].offset + 4].set(jnp.eye(2).ravel() * 50)
    flat = flat.at[seg["layer1.weight"].offset:seg["layer1.weight"].offset + 4].set(jnp.eye(2).ravel() / 50)
    v = jnp.array([0.5, 1.5])
    # silu(50 v) / 50 = v * sigmoid(50 v), which is v up to 1e-10 for these inputs
    np.testing.assert_allclose(approx.forward(spec, flat, v), v, atol=1e-10)
    assert set(p) == {"layer0.weight", "layer0.bias", "layer1.weight", "layer1.bias"}


def test_forward_matches_handrolled_reference():
    spec = ApproximatorSpec(2, 1, 2, 8)
    params = approx.init_params(spec, 42)
    x = np.array([1.0, 1.0])
    np.testing.assert_allclose(approx.forward(spec, params, jnp.asarray(x)),
                               _reference_forward(spec, params, x), rtol=1e-13)


def test_shape_mismatch_rejected():
    spec = ApproximatorSpec(3, 1)
    with pytest.raises(approx.ShapeError):
        approx.forward(spec, approx.init_params(spec, 0), jnp.ones(4))
    with pytest.raises(approx.ShapeError):
        approx.forward(spec, jnp.ones(spec.size + 1), jnp.ones(3))


def test_spec_validation():
    with pytest.raises(approx.ShapeError):
        ApproximatorSpec(3, 1, hidden_layers=0)
    with pytest.raises(ValueError):
        ApproximatorSpec(3, 1, output_head="softmax")


def test_unit_interval_head_bounded_for_extreme_inputs():
    spec = ApproximatorSpec(2, 3, 2, 8, output_head="unit_interval")
    params = approx.init_params(spec, 1) * 50
    x = jnp.array([[1e6, -1e6], [0.0, 0.0], [-3e3, 2e4]])
    out = approx.forward(spec, params, x)
    assert bool(jnp.all((out >= 0) & (out <= 1)))


def test_forward_is_deterministic_bitwise():
    spec = ApproximatorSpec(4, 2)
    params = approx.init_params(spec, 3)
    x = jax.random.normal(jax.random.PRNGKey(0), (5, 4))
    a, b = approx.forward(spec, params, x), approx.forward(spec, params, x)
    assert np.array_equal(np.asarray(a), np.asarray(b))
    assert np.array_equal(np.asarray(approx.init_params(spec, 3)), np.asarray(params))


def test_backward_zero_adjoint_and_linear_row():
    spec = ApproximatorSpec(3, 2, 1, 4)
    params = approx.init_params(spec, 0)
    x = jnp.array([0.1, 0.2, 0.3])
    g = approx.backward(spec, params, x, jnp.zeros(2))
    np.testing.assert_array_equal(g, np.zeros(spec.size))
    # last layer: d(e1 . out)/dW1[:, 0] equals the hidden activation vector
    g = approx.backward(spec, params, x, jnp.array([1.0, 0.0]))
    p = approx.unpack(spec, params)
    hidden = jax.nn.silu(x @ p["layer0.weight"] + p["layer0.bias"])
    gw = approx.unpack(spec, g)["layer1.weight"]
    np.testing.assert_allclose(gw[:, 0], hidden, rtol=1e-14)
    np.testing.assert_array_equal(gw[:, 1], np.zeros(4))


def test_backward_reports_non_finite_layer():
    spec = ApproximatorSpec(2, 1, 2, 4)
    params = approx.init_params(spec, 0).at[0].set(jnp.inf)
    with pytest.raises(approx.NonFiniteError, match="layer0"):
        approx.backward(spec, params, jnp.array([1.0, 1.0]), jnp.ones(1))


def test_gru_zero_params_halves_state():
    spec = GruSpec(3, 4)
    h = jnp.array([1.0, -2.0, 0.5, 4.0])
    out = approx.gru_step(spec, jnp.zeros(spec.size), jnp.ones(3), h)
    np.testing.assert_allclose(out, h / 2)


def test_quadratic_audit():
    params = jnp.linspace(-1, 1, 7)
    assert approx.gradient_audit(lambda p: 0.5 * jnp.sum(p ** 2), params) < 1e-6


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), head=st.sampled_from(approx.OUTPUT_HEADS))
def test_every_head_passes_gradient_audit(seed, head):
    spec = ApproximatorSpec(4, 3, 2, 6, output_head=head)
    key = jax.random.PRNGKey(seed)
    params = approx.init_params(spec, key)
    x = jax.random.normal(jax.random.fold_in(key, 1), (3, 4))
    adj = 0.01 * jax.random.normal(jax.random.fold_in(key, 2), (3, 3))
    loss = lambda p: jnp.sum(adj * approx.forward(spec, p, x))
    assert approx.gradient_audit(loss, params, max_coords=60, seed=seed) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_gru_passes_gradient_audit(seed):
    spec = GruSpec(2, 3)
    key = jax.random.PRNGKey(seed)
    params = approx.init_params(spec, key)
    xs = jax.random.normal(jax.random.fold_in(key, 1), (4, 2))

    def loss(p):
        h = jnp.zeros(3)
        for x in xs:
            h = approx.gru_step(spec, p, x, h)
        return 0.01 * jnp.sum(h)

    assert approx.gradient_audit(loss, params) < 1e-4


def test_optimizer_zero_gradient_keeps_params():
    params = jnp.array([1.0, -2.0])
    state = approx.adam_init(params, 0.1)
    new, state = approx.optimizer_step(params, jnp.zeros(2), state)
    np.testing.assert_array_equal(new, params)
    assert int(state.step_count) == 1


def test_optimizer_first_step_is_learning_rate():
    params = jnp.array([0.0])
    new, _ = approx.optimizer_step(params, jnp.array([1.0]), approx.adam_init(params, 0.1))
    np.testing.assert_allclose(new, [-0.1], rtol=1e-6)


def test_optimizer_rejects_non_finite_gradient():
    params = jnp.array([0.0])
    with pytest.raises(approx.NonFiniteError):
        approx.optimizer_step(params, jnp.array([jnp.nan]), approx.adam_init(params, 0.1))


def test_optimizer_runs_are_bit_identical():
    def run():
        p = approx.init_params(ApproximatorSpec(2, 1), 5)
        s = approx.adam_init(p, 1e-2)
        for i in range(5):
            p, s = approx.optimizer_step(p, jnp.sin(p * (i + 1)), s)
        return np.asarray(p)

    assert np.array_equal(run(), run())


def test_checkpoint_round_trip_bit_exact(tmp_path):
    segments = {"a/w": np.random.default_rng(0).normal(size=(3, 4)), "b": np.arange(5.0)}
    path = tmp_path / "x.ckpt"
    approx.save_checkpoint(path, segments)
    raw = path.read_bytes()
    assert raw.startswith(b"FOSPCKPT")
    back = approx.load_checkpoint(path)
    assert set(back) == set(segments)
    for k in segments:
        assert back[k].tobytes() == segments[k].astype(np.float64).tobytes()
    approx.save_checkpoint(tmp_path / "y.ckpt", back)
    assert (tmp_path / "y.ckpt").read_bytes() == raw


def test_checkpoint_rejects_bad_magic_and_truncation(tmp_path):
    path = tmp_path / "x.ckpt"
    approx.save_checkpoint(path, {"a": np.ones(3)})
    raw = path.read_bytes()
    with pytest.raises(approx.CheckpointError):
        approx.decode_checkpoint(b"NOTACKPT" + raw[8:])
    with pytest.raises(approx.CheckpointError):
        approx.decode_checkpoint(raw[:-5])


def test_tree_flatten_round_trip():
    tree = {"wm": {"gru": np.ones(3)}, "actor": np.zeros(2)}
    flat = approx.flatten_tree(tree)
    assert set(flat) == {"wm/gru", "actor"}
    back = approx.unflatten_tree(flat)
    np.testing.assert_array_equal(back["wm"]["gru"], tree["wm"]["gru"])
