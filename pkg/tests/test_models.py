import numpy as np
import pytest

from iglide import data as D
from iglide import models as M

from oracles import central_diff, rel_err
from toys import identity_ae

CMAPSS = D.CMAPSS_SENSORS


def test_fusion_width_six_groups(rng):
    m = M.build("iglide_ae", CMAPSS, M.ModelConfig(), rng, D.default_groups("cmapss"))
    assert m.heads[0].widths == [60, 2]
    assert len(m.encoders) == len(m.decoders) == 6
    assert [e.widths[0] for e in m.encoders] == [6, 1, 3, 2, 3, 6]
    assert [d.widths[-1] for d in m.decoders] == [6, 1, 3, 2, 3, 6]


def test_monolithic_widths(rng):
    m = M.build("ae", CMAPSS, M.ModelConfig(), rng)
    assert m.encoders[0].widths == [21, 10, 20, 10]
    assert m.heads[0].widths == [10, 2]
    assert m.decoders[0].widths == [2, 10, 20, 10, 21]


def test_single_group_iglide_matches_monolithic_shape(rng):
    spec = D.GroupSpec.single(CMAPSS)
    g = M.build("iglide_vae", CMAPSS, M.ModelConfig(), rng, spec)
    m = M.build("vae", CMAPSS, M.ModelConfig(), rng)
    assert [n.widths for n in g.nets()] == [n.widths for n in m.nets()]
    assert g.params.shape == m.params.shape


def test_decoder_dropout_only_on_hidden_layers(rng):
    m = M.build("ae", ["a", "b"], M.ModelConfig(), rng)
    assert [l.dropout for l in m.decoders[0].layers] == [0.2, 0.2, 0.2, 0.0]
    assert all(l.dropout == 0 for l in m.encoders[0].layers)


def test_eval_is_deterministic(rng):
    m = M.build("ae", ["a", "b", "c"], M.ModelConfig(), rng)
    x = rng.random((5, 3))
    np.testing.assert_array_equal(M.model_forward(m, x).xhat, M.model_forward(m, x).xhat)


def test_vae_eval_uses_mean(rng):
    m = M.build("vae", ["a", "b", "c"], M.ModelConfig(), rng)
    out = M.model_forward(m, rng.random((4, 3)))
    np.testing.assert_array_equal(out.z, out.mu)


def test_identity_weights_reconstruct_exactly():
    m = identity_ae()
    x = np.linspace(0, 1, 7)[:, None]
    out = M.model_forward(m, x)
    np.testing.assert_array_equal(out.xhat, x)
    assert np.mean((out.xhat - x) ** 2) == 0


def test_select_rejects_wrong_width(rng):
    m = M.build("ae", ["a", "b"], M.ModelConfig(), rng)
    with pytest.raises(Exception):
        M.model_forward(m, np.zeros((2, 3)))


def test_params_are_views(rng):
    m = M.build("iglide_vae", [f"c{i}" for i in range(4)], M.ModelConfig(), rng,
                D.GroupSpec.from_mapping({"x": ["c0", "c1"], "y": ["c2", "c3"]}))
    m.params[:] = 0.0
    assert all(np.all(p == 0) for n in m.nets() for p in n.parameters())


@pytest.mark.parametrize("kind", ["ae", "vae", "iglide_ae", "iglide_vae"])
def test_model_gradient_matches_finite_differences(kind):
    rng = np.random.default_rng(21)
    schema = [f"c{i}" for i in range(5)]
    spec = D.GroupSpec.from_mapping({"p": ["c0", "c1"], "q": ["c2"], "r": ["c3", "c4"]})
    cfg = M.ModelConfig(latent_dim=2, hidden=(4, 6, 3), beta=0.7)
    m = M.build(kind, schema, cfg, rng, spec)
    # random biases: with zero biases a sample whose upstream units are all
    # dead sits exactly on a ReLU kink, where finite differences are undefined
    m.params[:] += rng.normal(scale=0.1, size=m.params.shape)
    xg = m.select(rng.random((6, 5)))

    def loss():
        return m.loss_and_grad(xg, "train", np.random.default_rng(5))[0]

    _, grad, _, _ = m.loss_and_grad(xg, "train", np.random.default_rng(5))
    fd = central_diff(loss, m.params)
    assert rel_err(grad, fd) < 1e-4


def test_beta_zero_vae_objective_is_reconstruction(rng):
    m = M.build("vae", ["a", "b"], M.ModelConfig(beta=0.0), rng)
    xg = m.select(rng.random((8, 2)))
    total, _, recon, kl = m.loss_and_grad(xg, "train", np.random.default_rng(0))
    assert total == recon and kl > 0


def test_gradient_reaches_every_block(rng):
    m = M.build("iglide_vae", ["a", "b", "c"], M.ModelConfig(), rng,
                D.GroupSpec.from_mapping({"g": ["a"], "h": ["b", "c"]}))
    _, grad, _, _ = m.loss_and_grad(m.select(rng.random((32, 3))), "train", rng)
    pos = 0
    for net in m.nets():
        n = sum(p.size for p in net.parameters())
        assert np.any(grad[pos : pos + n] != 0)
        pos += n


def _healthy(n=400, seed=0):
    ts = D.make_synthetic(D.SynthCfg(n_units=8, n_channels=6), seed)
    x = D.select_healthy(ts, D.HealthyPolicy())
    return D.apply_norm(D.fit_norm(x), x), ts.channels


def test_training_reduces_loss():
    x, ch = _healthy()
    cfg = M.ModelConfig(epochs=200)
    m = M.build("ae", ch, cfg, np.random.default_rng(0))
    hist = M.train(m, x, cfg, np.random.default_rng(0))
    assert len(hist) == 200
    assert hist[-1]["train_loss"] < hist[0]["train_loss"]


def test_training_is_reproducible():
    x, ch = _healthy()
    cfg = M.ModelConfig(epochs=5)

    def run():
        m = M.build("iglide_vae", ch, cfg, np.random.default_rng(3), D.synth_groups(D.SynthCfg(n_channels=6)))
        return M.train(m, x, cfg, np.random.default_rng(3)), m.params.copy()

    (h1, p1), (h2, p2) = run(), run()
    assert h1 == h2
    np.testing.assert_array_equal(p1, p2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported():
    x, ch = _healthy()
    cfg = M.ModelConfig(epochs=3, lr=1e12)
    m = M.build("vae", ch, cfg, np.random.default_rng(0))
    with pytest.raises(M.DivergenceError):
        M.train(m, x * 1e150, cfg, np.random.default_rng(0))


def test_descriptor_roundtrip(rng):
    spec = D.GroupSpec.from_mapping({"g": ["a"], "h": ["b", "c"]})
    m = M.build("iglide_ae", ["a", "b", "c"], M.ModelConfig(), rng, spec)
    m2 = M.GroupedAutoencoder.from_descriptor(m.descriptor(), m.params)
    x = rng.random((3, 3))
    np.testing.assert_array_equal(M.model_forward(m, x).xhat, M.model_forward(m2, x).xhat)


def test_window_size_other_than_one_rejected():
    with pytest.raises(NotImplementedError):
        M.ModelConfig(window_size=5)
