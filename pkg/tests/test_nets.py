import math

import numpy as np
import pytest

from unilateral_da import grad as G
from unilateral_da import nets
from unilateral_da.nets import ArchitectureSpec
from unilateral_da.train import sgd_step

SMALL = ArchitectureSpec(num_classes=3, input_length=16, feature_dim=8, classifier_hidden=6,
                         discriminator_hidden=(5, 4))


def zeroed(spec):
    p = nets.init_params(spec, 0)
    for _, a in p.items():
        a[...] = 0.0
    return p


# ------------------------------------------------------------------ spec

def test_default_spec_matches_backbone():
    s = ArchitectureSpec()
    assert s.flat_dim == 10 * 508 == 5080
    shapes = s.layer_shapes()
    assert shapes["extractor"]["conv0.k"] == (10, 1, 3)
    assert shapes["extractor"]["conv1.k"] == (10, 10, 3)
    assert shapes["extractor"]["fc.W"] == (5080, 256)
    assert shapes["classifier"]["out.W"] == (256, 10)
    assert shapes["discriminator"]["out.W"] == (256, 2)


@pytest.mark.parametrize("kwargs", [
    {"input_length": 4, "conv_layers": 2},
    {"feature_dim": 0},
    {"num_classes": 0},
    {"discriminator_hidden": (4,)},
    {"dropout_rate": 1.0},
])
def test_invalid_spec_rejected(kwargs):
    with pytest.raises(ValueError):
        ArchitectureSpec(**kwargs)


def test_param_count_matches_allocation():
    for spec in (SMALL, ArchitectureSpec()):
        assert nets.init_params(spec, 1).count() == spec.param_count()
    # hand count for the default spec
    ext = (10 * 1 * 3 + 10) + (10 * 10 * 3 + 10) + (5080 * 256 + 256)
    clf = (256 * 256 + 256) + (256 * 10 + 10)
    disc = (256 * 256 + 256) * 2 + (256 * 2 + 2)
    assert ArchitectureSpec().param_count() == ext + clf + disc


# ------------------------------------------------------------------ init

def test_init_is_deterministic_and_seeded():
    a, b, c = nets.init_params(SMALL, 3), nets.init_params(SMALL, 3), nets.init_params(SMALL, 4)
    assert a.equals(b)
    assert not a.equals(c)


def test_init_biases_zero_and_weights_in_glorot_range():
    p = nets.init_params(SMALL, 0)
    for (group, name), arr in p.items():
        if name.endswith(".b"):
            assert not arr.any()
        else:
            if arr.ndim == 3:
                fan_in, fan_out = arr.shape[1] * 3, arr.shape[0] * 3
            else:
                fan_in, fan_out = arr.shape
            assert np.abs(arr).max() <= math.sqrt(6.0 / (fan_in + fan_out))


def test_init_gain_scales_weights():
    a, b = nets.init_params(SMALL, 0), nets.init_params(SMALL, 0, gain=4.0)
    np.testing.assert_allclose(b["extractor"]["fc.W"], 4.0 * a["extractor"]["fc.W"])


def test_init_rejects_non_spec():
    with pytest.raises(TypeError):
        nets.init_params({"num_classes": 3}, 0)


# --------------------------------------------------------------- forward

def test_feature_shape_range_and_eval_determinism():
    p = nets.init_params(ArchitectureSpec(), 0)
    x = np.random.default_rng(0).normal(size=(3, 512))
    f1 = nets.feature_forward(p, x).data
    f2 = nets.feature_forward(p, x).data
    assert f1.shape == (3, 256)
    assert ((f1 > 0) & (f1 < 1)).all()
    assert f1.tobytes() == f2.tobytes()


def test_feature_forward_rejects_width_mismatch():
    with pytest.raises(ValueError):
        nets.feature_forward(nets.init_params(SMALL, 0), np.zeros((2, 15)))


def test_train_mode_dropout_is_seeded():
    p = nets.init_params(SMALL, 0)
    x = np.random.default_rng(1).normal(size=(4, 16))
    a = nets.feature_forward(p, x, train=True, rng=np.random.default_rng(9)).data
    b = nets.feature_forward(p, x, train=True, rng=np.random.default_rng(9)).data
    c = nets.feature_forward(p, x, train=False).data
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()


def test_classify_zero_weights_returns_biases():
    p = zeroed(SMALL)
    p["classifier"]["out.b"][:] = [0.5, -1.0, 2.0]
    logits = nets.classify(p, np.random.default_rng(0).random((4, 8))).data
    assert logits.shape == (4, 3)
    np.testing.assert_array_equal(logits, np.tile([0.5, -1.0, 2.0], (4, 1)))


def test_classify_and_discriminate_reject_bad_width():
    p = nets.init_params(SMALL, 0)
    with pytest.raises(ValueError):
        nets.classify(p, np.zeros((2, 7)))
    with pytest.raises(ValueError):
        nets.discriminate(p, np.zeros((2, 9)))


def test_discriminate_zero_weights_gives_ln2():
    p = zeroed(SMALL)
    g = G.Graph()
    logits = nets.discriminate(p, g.constant(np.random.default_rng(0).random((6, 8))))
    assert logits.shape == (6, 2)
    loss = G.softmax_cross_entropy(logits, np.array([0, 0, 0, 1, 1, 1]))
    assert float(loss.data) == pytest.approx(math.log(2), abs=1e-15)


def test_discriminate_deterministic():
    p = nets.init_params(SMALL, 2)
    f = np.random.default_rng(0).random((3, 8))
    assert nets.discriminate(p, f).data.tobytes() == nets.discriminate(p, f).data.tobytes()


def test_shared_graph_reuses_parameters():
    p = nets.init_params(SMALL, 0)
    g = G.Graph()
    x = np.random.default_rng(0).normal(size=(2, 16))
    nets.feature_forward(p, x, graph=g)
    n = len(g.params)
    nets.feature_forward(p, x, graph=g)
    assert len(g.params) == n


def test_network_gradients_match_finite_differences():
    p = nets.init_params(SMALL, 5)
    x0 = np.random.default_rng(1).normal(size=(3, 16))
    labels = np.array([0, 2, 1])

    def f(g, x):
        return G.softmax_cross_entropy(nets.classify(p, nets.feature_forward(p, x, graph=g), g), labels)

    assert G.finite_diff_check(f, x0) <= 1e-5


# ---------------------------------------------------------------- freeze

def test_freeze_is_readonly_copy_and_idempotent():
    p = nets.init_params(SMALL, 0)
    fz = nets.freeze(p)
    assert fz is not p and fz.equals(p)
    assert nets.freeze(fz) is fz
    with pytest.raises(ValueError):
        fz["extractor"]["fc.W"][0, 0] = 1.0


def test_optimizer_step_leaves_frozen_params_unchanged():
    p = nets.init_params(SMALL, 0)
    fz = nets.freeze(p)
    before = fz.copy()
    grads = {k: np.ones_like(a) for k, a in fz.items()}
    sgd_step(fz, grads, 0.1)
    assert fz.equals(before)


def test_frozen_forward_matches_unfrozen():
    p = nets.init_params(SMALL, 0)
    x = np.random.default_rng(0).normal(size=(2, 16))
    a = nets.classify(p, nets.feature_forward(p, x)).data
    fz = nets.freeze(p)
    b = nets.classify(fz, nets.feature_forward(fz, x)).data
    assert a.tobytes() == b.tobytes()


def test_frozen_params_get_no_gradient():
    fz = nets.freeze(nets.init_params(SMALL, 0))
    g = G.Graph()
    loss = G.sum_all(nets.feature_forward(fz, np.ones((1, 16)), graph=g))
    assert nets.param_gradients(g, fz, G.backward(loss)) == {}


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip_is_bitwise(tmp_path):
    p = nets.init_params(SMALL, 7)
    manifest, payload = nets.save_checkpoint(p, tmp_path / "model")
    assert payload.stat().st_size == 8 * p.count()
    q = nets.load_checkpoint(tmp_path / "model")
    assert q.spec == SMALL
    assert q.equals(p)
    assert not q.frozen


def test_checkpoint_manifest_layout(tmp_path):
    import json
    p = nets.init_params(SMALL, 7)
    manifest, payload = nets.save_checkpoint(nets.freeze(p), tmp_path / "m")
    doc = json.loads(manifest.read_text(encoding="utf-8"))
    offsets = [layer["offset"] for layer in doc["layers"]]
    assert offsets[0] == 0
    assert all(b - a == layer["nbytes"] for a, b, layer in zip(offsets, offsets[1:], doc["layers"]))
    first = doc["layers"][0]
    raw = payload.read_bytes()[:first["nbytes"]]
    np.testing.assert_array_equal(np.frombuffer(raw, "<f8").reshape(first["shape"]),
                                  p["extractor"]["conv0.k"])
    assert nets.load_checkpoint(tmp_path / "m").frozen == {"extractor", "classifier", "discriminator"}


def test_shares_backbone():
    assert nets.shares_backbone(nets.init_params(SMALL, 0), nets.init_params(SMALL, 1))
    other = ArchitectureSpec(num_classes=4, input_length=16, feature_dim=8, classifier_hidden=6,
                             discriminator_hidden=(5, 4))
    assert not nets.shares_backbone(nets.init_params(SMALL, 0), nets.init_params(other, 0))
