import numpy as np
import pytest

from advinv import tensor as tc
from advinv.model import (CheckpointError, ConfigError, EncoderConfig, Head, Network,
                          build_encoder, encoder_forward, head_forward, load_checkpoint,
                          save_checkpoint)

FULL = EncoderConfig(16, 128)

ARCHITECTURE_SHAPES = [  # architecture output dims with the batch axis prepended, N=2
    ("input", (2, 1, 16, 128)),
    ("b1.conv", (2, 20, 16, 64)),
    ("b1.bn", (2, 20, 16, 64)),
    ("b2.conv", (2, 400, 1, 64)),
    ("b2.bn", (2, 400, 1, 64)),
    ("b2.reshape", (2, 1, 400, 64)),
    ("b3.conv", (2, 200, 1, 32)),
    ("b3.bn", (2, 200, 1, 32)),
    ("b3.reshape", (2, 1, 200, 32)),
    ("b4.conv", (2, 100, 1, 16)),
    ("b4.bn", (2, 100, 1, 16)),
    ("flatten", (2, 1600)),
]


@pytest.fixture(scope="module")
def full_encoder():
    return build_encoder(FULL, seed=0)


def test_full_kernel_shapes(full_encoder):
    p = full_encoder.params
    assert p["enc.b1.kernel"].shape == (20, 1, 1, 64)
    assert p["enc.b2.kernel"].shape == (20, 20, 16, 1)
    assert p["enc.b3.kernel"].shape == (200, 1, 400, 32)
    assert p["enc.b4.kernel"].shape == (100, 1, 200, 16)
    assert FULL.feature_dim == 1600


def test_full_strides_and_pads():
    layout = FULL.blocks()
    assert layout["b1"][1:3] == ((1, 2), (0, 31))
    assert layout["b2"][1:3] == ((1, 1), (0, 0))
    assert layout["b3"][1:3] == ((1, 2), (0, 15))
    assert layout["b4"][1:3] == ((1, 2), (0, 7))


def test_intermediate_shapes_match_architecture(full_encoder):
    trace = []
    feats = full_encoder.forward(np.zeros((2, 16, 128), np.float32), trace=trace)[0]
    assert trace == ARCHITECTURE_SHAPES
    assert feats.shape == (2, 1600)


def test_parameter_count(full_encoder):
    # per block: kernel + bias/gamma/beta per output map
    expected = (20 * 64 + 3 * 20) + (20 * 20 * 16 + 3 * 400) \
        + (200 * 400 * 32 + 3 * 200) + (100 * 200 * 16 + 3 * 100)
    assert full_encoder.n_parameters() == expected == 2_889_840


@pytest.mark.parametrize("c,t", [(3, 16), (16, 128), (4, 32), (8, 64)])
def test_feature_dim_formula(c, t):
    enc = build_encoder(EncoderConfig(c, t, 2, 2, 4, 3))
    assert encoder_forward(enc, np.zeros((1, c, t), np.float32)).shape == (1, 3 * t // 8)
    assert EncoderConfig(c, t).feature_dim == 100 * t // 8


def test_reduced_config():
    cfg = EncoderConfig.reduced()
    assert (cfg.n_temporal, cfg.depth_multiplier, cfg.n_block3, cfg.n_block4) == (2, 2, 20, 10)
    assert EncoderConfig(3, 16).feature_dim == 200


@pytest.mark.parametrize("t", [12, 100, 24])
def test_bad_sample_count(t):
    with pytest.raises(ConfigError):
        build_encoder(EncoderConfig(3, t))


def test_zero_input_zero_features():
    enc = build_encoder(EncoderConfig(3, 16), seed=1)
    feats = encoder_forward(enc, np.zeros((3, 3, 16), np.float32), mode="train")
    assert not feats.any()


def test_eval_forward_deterministic(rng):
    enc = build_encoder(EncoderConfig(4, 32), seed=2)
    X = rng.standard_normal((5, 4, 32)).astype(np.float32)
    a = encoder_forward(enc, X, mode="eval")
    b = encoder_forward(enc, X, mode="eval")
    assert a.tobytes() == b.tobytes()


def test_shape_mismatch():
    enc = build_encoder(EncoderConfig(3, 16))
    with pytest.raises(tc.DimensionError):
        encoder_forward(enc, np.zeros((1, 4, 16), np.float32))


def test_init_statistics():
    enc = build_encoder(FULL, seed=0)
    k = enc.params["enc.b3.kernel"]
    bound = np.sqrt(6 / (400 * 32))
    assert np.abs(k).max() <= bound
    assert abs(k.std() - bound / np.sqrt(3)) < 0.01 * bound
    assert not enc.params["enc.b3.bias"].any()
    assert np.all(enc.params["enc.b3.gamma"] == 1)


def test_same_seed_same_params():
    a, b = build_encoder(FULL, seed=5), build_encoder(FULL, seed=5)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)


def test_head_shapes_and_uniform():
    head = Head.build("id", 1600, 10)
    assert head_forward(head, np.zeros((3, 1600), np.float32)).shape == (3, 10)
    assert Head.build("adv", 1600, 2).n_classes == 2
    zero = Head("id", np.zeros((4, 6)), np.zeros(4))
    _, probs = tc.softmax_cross_entropy(head_forward(zero, np.ones((2, 6))), [0, 1])
    np.testing.assert_allclose(probs, 0.25)
    with pytest.raises(ConfigError):
        Head.build("id", 10, 1)
    with pytest.raises(tc.DimensionError):
        head_forward(head, np.zeros((3, 1599)))


def test_network_session_map():
    net = Network.build(EncoderConfig(3, 16), 4, session_map=(0, 2))
    np.testing.assert_array_equal(net.map_sessions([2, 0, 2]), [1, 0, 1])
    with pytest.raises(ValueError):
        net.map_sessions([1])


def test_network_gradients_fd(rng):
    """Encoder + both heads under CE_id - lam * CE_adv, float64."""
    from advinv.trainer import objective
    from conftest import max_rel_err, numeric_grad

    net = Network.build(EncoderConfig.reduced(), 3, session_map=(0, 1), seed=3,
                        dtype=np.float64)
    X = rng.standard_normal((6, 3, 16))
    s = np.array([0, 1, 2, 0, 1, 2])
    r = np.array([0, 0, 1, 1, 0, 1])
    _, _, _, grads = objective(net, X, s, r, 0.05, update_stats=False)
    params = net.theta_gamma()
    for name in ("enc.b3.kernel", "enc.b4.gamma", "enc.b2.kernel", "id.weight"):
        f = lambda: objective(net, X, s, r, 0.05, update_stats=False)[2]
        assert max_rel_err(grads[name], numeric_grad(f, params[name])) < 1e-4, name


def test_checkpoint_roundtrip(tmp_path, rng):
    net = Network.build(EncoderConfig(4, 32), 5, session_map=(0, 2), seed=4)
    net.encoder.stats["b2"].mean[:] = rng.standard_normal(net.encoder.stats["b2"].mean.shape)
    path = tmp_path / "m.ainv"
    save_checkpoint(path, net)
    back = load_checkpoint(path)
    assert back.config == net.config and back.session_map == (0, 2)
    for k, v in net.all_params().items():
        assert back.all_params()[k].tobytes() == v.tobytes()
    assert back.encoder.stats["b2"].mean.tobytes() == net.encoder.stats["b2"].mean.tobytes()
    assert path.read_bytes()[:4] == b"AINV"


def test_checkpoint_without_adversary(tmp_path):
    net = Network.build(EncoderConfig(3, 16), 3)
    save_checkpoint(tmp_path / "m", net)
    assert load_checkpoint(tmp_path / "m").adversary is None


def test_checkpoint_errors(tmp_path):
    net = Network.build(EncoderConfig(3, 16), 3)
    save_checkpoint(tmp_path / "m", net)
    raw = (tmp_path / "m").read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="offset 0"):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short")
