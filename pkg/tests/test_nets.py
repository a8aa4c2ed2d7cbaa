import numpy as np
import pytest

from conftest import rel_err
from mtard import nets
from mtard.entropy_balance import batch_mean_entropy
from mtard.exceptions import CheckpointError, InvalidInputError, StaleCacheError
from mtard.numeric import numerical_gradient, tempered_softmax


def _random_net(rng, conv=False):
    if conv:
        spec = nets.conv_spec((2, 5, 5), (3,), 3, kernel=3)
    else:
        depth = int(rng.integers(0, 3))
        hidden = tuple(int(h) for h in rng.integers(2, 9, size=depth))
        spec = nets.mlp_spec(int(rng.integers(1, 5)), hidden, int(rng.integers(2, 5)))
    return nets.init_params(spec, int(rng.integers(1 << 30)))


def _check_grads(params, x, rng):
    up = rng.normal(size=(len(x), params.spec.n_classes))

    def f_of_params(flat, idx):
        arrays = [a.copy() for a in params.arrays()]
        arrays[idx] = flat
        return float(np.sum(up * nets.forward(params.with_arrays(arrays), x)))

    pg, gx = nets.backward(params, x, up)
    for i, (a, g) in enumerate(zip(params.arrays(), pg.arrays())):
        fd = numerical_gradient(lambda v: f_of_params(v, i), a)
        assert rel_err(g, fd, floor=1e-6) < 1e-4
    fd_x = numerical_gradient(lambda v: float(np.sum(up * nets.forward(params, v))), x)
    assert rel_err(gx, fd_x, floor=1e-6) < 1e-4


def test_spec_validation():
    with pytest.raises(InvalidInputError):
        nets.NetworkSpec((3,), (nets.LayerSpec("dense", 4),), 2)
    with pytest.raises(InvalidInputError):
        nets.NetworkSpec((3,), (nets.LayerSpec("pool"),), 3)
    with pytest.raises(InvalidInputError):
        nets.conv_spec((1, 2, 2), (4,), 2, kernel=3)
    spec = nets.mlp_spec(2, (32, 32), 3)
    assert nets.NetworkSpec.from_dict(spec.to_dict()) == spec
    assert spec.fingerprint() != nets.mlp_spec(2, (32, 16), 3).fingerprint()
    assert len(spec.fingerprint()) == 8


def test_init_deterministic_and_seeded():
    spec = nets.mlp_spec(2, (8, 8), 3)
    a, b = nets.init_params(spec, 7), nets.init_params(spec, 7)
    assert a.equals(b) and a.digest() == b.digest()
    assert not a.equals(nets.init_params(spec, 8))


def test_init_bounds():
    p = nets.init_params(nets.mlp_spec(16, (4,), 2), 0)
    W, b = p.tensors[0]
    assert np.all(np.abs(W) <= 0.25) and np.all(np.abs(b) <= 0.25)


@pytest.mark.parametrize("spec", [nets.mlp_spec(2, (32, 32), 2), nets.mlp_spec(2, (32, 32), 10),
                                  nets.conv_spec((1, 8, 8), (8, 16), 10)])
def test_fresh_network_entropy_near_uniform(spec):
    X = np.random.default_rng(0).uniform(size=(500, spec.n_features))
    h = batch_mean_entropy(nets.forward(nets.init_params(spec, 0), X), 1.0)
    assert abs(h - np.log(spec.n_classes)) <= 0.05 * np.log(spec.n_classes)


def test_zero_params_give_uniform_predictions():
    p = nets.init_params(nets.mlp_spec(3, (5,), 4), 0).zeros_like()
    z = nets.forward(p, np.random.default_rng(0).uniform(size=(6, 3)))
    assert np.all(z == 0)
    np.testing.assert_allclose(tempered_softmax(z), 0.25)


def test_single_dense_layer_is_affine_map():
    spec = nets.NetworkSpec((3,), (nets.LayerSpec("dense", 2),), 2)
    W = np.array([[1.0, -2.0], [0.5, 0.0], [3.0, 1.0]])
    b = np.array([0.1, -0.2])
    p = nets.NetworkParams(spec, ((W, b),))
    x = np.array([[1.0, 2.0, 3.0], [0.0, -1.0, 0.5]])
    expected = [[1 + 1 + 9 + 0.1, -2 + 0 + 3 - 0.2], [-0.5 + 1.5 + 0.1, 0 + 0.5 - 0.2]]
    np.testing.assert_allclose(nets.forward(p, x), expected, atol=1e-14)


@pytest.mark.parametrize("conv", [False, True])
def test_batch_consistency_and_no_mutation(conv, rng):
    p = _random_net(rng, conv)
    X = rng.uniform(size=(7, p.spec.n_features))
    X0 = X.copy()
    batch = nets.forward(p, X)
    rows = np.concatenate([nets.forward(p, X[i:i + 1]) for i in range(len(X))])
    np.testing.assert_allclose(batch, rows, rtol=1e-12, atol=1e-12)
    perm = rng.permutation(len(X))
    np.testing.assert_allclose(nets.forward(p, X[perm]), batch[perm], rtol=1e-12, atol=1e-12)
    assert np.array_equal(X, X0)


def test_forward_shape_mismatch():
    p = nets.init_params(nets.mlp_spec(3, (4,), 2), 0)
    with pytest.raises(InvalidInputError):
        nets.forward(p, np.zeros((2, 4)))


def test_mlp_gradients_match_fd(rng):
    for _ in range(10):
        p = _random_net(rng)
        _check_grads(p, rng.uniform(size=(4, p.spec.n_features)), rng)


def test_conv_gradients_match_fd(rng):
    p = _random_net(rng, conv=True)
    _check_grads(p, rng.uniform(size=(2, p.spec.n_features)), rng)


def test_zero_upstream_gives_zero_gradients(rng):
    p = _random_net(rng)
    x = rng.uniform(size=(3, p.spec.n_features))
    pg, gx = nets.backward(p, x, np.zeros((3, p.spec.n_classes)))
    assert all(np.all(a == 0) for a in pg.arrays()) and np.all(gx == 0)


def test_stale_cache_rejected(rng):
    p = _random_net(rng)
    x = rng.uniform(size=(3, p.spec.n_features))
    _, cache = nets.forward(p, x, return_cache=True)
    up = np.ones((3, p.spec.n_classes))
    with pytest.raises(StaleCacheError):
        nets.backward(p.astype(np.float64), x, up, cache=cache)
    with pytest.raises(StaleCacheError):
        nets.backward(p, x + 0.1, up, cache=cache)
    nets.backward(p, x.copy(), up, cache=cache)


def test_predict_logits_chunks(rng):
    p = _random_net(rng)
    X = rng.uniform(size=(50, p.spec.n_features))
    np.testing.assert_allclose(nets.predict_logits(p, X, batch_size=7), nets.forward(p, X), rtol=1e-12, atol=1e-15)
    assert nets.predict_logits(p, X[:0]).shape == (0, p.spec.n_classes)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    p = nets.init_params(nets.conv_spec((1, 6, 6), (2,), 3), 4, role="robust-teacher", dtype=dtype)
    path = tmp_path / "net.ckpt"
    nets.save_checkpoint(p, path)
    q = nets.load_checkpoint(path, spec=p.spec, role="robust-teacher")
    assert q.equals(p) and q.digest() == p.digest() and q.dtype == dtype
    assert path.read_bytes()[:4] == b"MTRD"


def test_checkpoint_wrong_spec_or_role(tmp_path):
    p = nets.init_params(nets.mlp_spec(2, (4,), 2), 0, role="clean-teacher")
    path = tmp_path / "net.ckpt"
    nets.save_checkpoint(p, path)
    with pytest.raises(CheckpointError, match="fingerprint"):
        nets.load_checkpoint(path, spec=nets.mlp_spec(2, (5,), 2))
    with pytest.raises(CheckpointError, match="role"):
        nets.load_checkpoint(path, role="robust-teacher")


def test_checkpoint_corruption(tmp_path):
    p = nets.init_params(nets.mlp_spec(2, (4,), 2), 0)
    blob = nets.dump_checkpoint_bytes(p)
    for cut in (0, 3, 10, 30, len(blob) - 1):
        with pytest.raises(CheckpointError):
            nets.parse_checkpoint_bytes(blob[:cut])
    with pytest.raises(CheckpointError, match="magic"):
        nets.parse_checkpoint_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointError, match="version"):
        nets.parse_checkpoint_bytes(blob[:4] + b"\x09\x00" + blob[6:])
    with pytest.raises(CheckpointError, match="trailing"):
        nets.parse_checkpoint_bytes(blob + b"\x00")
    path = tmp_path / "empty.ckpt"
    path.write_bytes(b"")
    with pytest.raises(CheckpointError):
        nets.load_checkpoint(path)
