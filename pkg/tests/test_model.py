import numpy as np
import pytest

from escore.model import EnergyNet, NetConfig
from escore.numerics import Rng, sym_defect

SMALL = NetConfig(state_hidden=8, trunk_hidden=12, n_blocks=1, time_dim=8,
                  head_hidden=6)


@pytest.fixture
def net():
    return EnergyNet(2, 2, SMALL, Rng(0))


def test_energy_shape_and_determinism(net):
    rng = Rng(1)
    a, s = rng.normal((4, 2)), rng.normal((4, 2))
    e1 = net.energy(a, s, 0.3)
    e2 = net.energy(a, s, 0.3)
    assert e1.shape == (4,)
    assert np.array_equal(e1, e2)


def test_score_is_negative_energy_gradient(net):
    rng = Rng(2)
    a, s = rng.normal((3, 2)), rng.normal((3, 2))
    sc = net.score(a, s, 0.5)
    h = 1e-6
    for j in range(2):
        ap, am = a.copy(), a.copy()
        ap[:, j] += h
        am[:, j] -= h
        fd = (net.energy(ap, s, 0.5) - net.energy(am, s, 0.5)) / (2 * h)
        assert np.max(np.abs(sc[:, j] + fd)) < 1e-6


def test_score_jacobian_is_symmetric(net):
    rng = Rng(3)
    a, s = rng.normal((6, 2)), rng.normal((6, 2))
    jac = net.score_jacobian(a, s, 0.2)
    for j in jac:
        assert sym_defect(j) < 1e-10


def test_row_values_independent_of_batch(net):
    rng = Rng(4)
    a, s = rng.normal((5, 2)), rng.normal((5, 2))
    full = net.energy(a, s, 0.6)
    single = net.energy(a[2:3], s[2:3], 0.6)
    # matmul reduction order varies with batch shape, so only require
    # agreement to accumulation roundoff
    assert abs(full[2] - single[0]) < 1e-12


def test_time_outside_horizon_rejected(net):
    a = np.zeros((1, 2))
    with pytest.raises(ValueError):
        net.energy(a, a, 1.5)
    with pytest.raises(ValueError):
        net.energy(a, a, -0.1)


def test_project_head_caps_singular_values(net):
    for sn in net.head_maps():
        sn.W.value *= 10.0
    net.project_head()
    for sn in net.head_maps():
        assert np.linalg.svd(sn.W.value, compute_uv=False)[0] <= 1.0 + 1e-10


def test_checkpoint_roundtrip_is_exact(net, tmp_path):
    path = tmp_path / "ck.bin"
    net.save(path)
    loaded = EnergyNet.load(path, SMALL)
    assert np.array_equal(net.flat_params(), loaded.flat_params())
    rng = Rng(5)
    a, s = rng.normal((3, 2)), rng.normal((3, 2))
    assert np.array_equal(net.energy(a, s, 0.4), loaded.energy(a, s, 0.4))
    assert np.array_equal(net.score(a, s, 0.4), loaded.score(a, s, 0.4))


def test_checkpoint_rejects_wrong_config(net, tmp_path):
    path = tmp_path / "ck.bin"
    net.save(path)
    with pytest.raises(ValueError):
        EnergyNet.load(path, NetConfig(state_hidden=16, trunk_hidden=12,
                                       n_blocks=1, time_dim=8, head_hidden=6))


def test_flat_param_roundtrip(net):
    flat = net.flat_params()
    other = EnergyNet(2, 2, SMALL, Rng(99))
    assert not np.array_equal(other.flat_params(), flat)
    other.load_flat_params(flat)
    assert np.array_equal(other.flat_params(), flat)
