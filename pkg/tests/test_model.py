import numpy as np
import pytest

from csasr.autodiff import ShapeError, Tensor, backward, no_grad, ops
from csasr.model import CAUSAL, FULL_CONTEXT, ConfigError, HybridCSASR, ModelConfig, collate
from csasr.model.nn import sinusoidal_positions

from helpers import random_batch, tiny_model


def grads_of(model, loss):
    model.zero_grad()
    backward(loss)
    return {k: p.grad.copy() for k, p in model.parameters().items()}


def test_encoder_shape_full_width():
    cfg = ModelConfig(d_model=256, heads=4, enc_layers=1, dec_layers=1, ffn_dim=64, feature_dim=16, dropout=0.0)
    model = HybridCSASR(cfg).eval()
    with no_grad():
        enc = model.encode(np.zeros((40, 16)))
    assert enc.H.shape == (1, 10, 256)
    assert list(enc.lengths) == [10]


@pytest.mark.parametrize("t,expected", [(1, 1), (4, 1), (5, 2), (9, 3), (13, 4)])
def test_subsampled_length_is_ceil_chain(t, expected):
    model = tiny_model().eval()
    with no_grad():
        assert model.encode(np.zeros((t, 4))).H.shape[1] == expected


def test_encoder_eval_deterministic_and_sensitive():
    model = tiny_model().eval()
    x = np.random.default_rng(0).normal(size=(12, 4))
    with no_grad():
        h1 = model.encode(x).H.data
        h2 = model.encode(x).H.data
        np.testing.assert_array_equal(h1, h2)
        np.testing.assert_array_equal(model.encode(np.zeros((12, 4))).H.data, model.encode(np.zeros((12, 4))).H.data)
        for t in range(12):
            y = x.copy()
            y[t] += 1.0
            assert np.abs(model.encode(y).H.data - h1).max() > 1e-6


def test_padding_does_not_change_valid_outputs():
    model = tiny_model().eval()
    x = np.random.default_rng(1).normal(size=(1, 9, 4))
    padded = np.concatenate([x, np.random.default_rng(2).normal(size=(1, 7, 4))], axis=1)
    with no_grad():
        a = model.encode(x, [9])
        b = model.encode(padded, [9])
    assert list(b.lengths) == [3]
    np.testing.assert_allclose(a.H.data[0], b.H.data[0, :3], atol=1e-12)


def test_ctc_head_normalised():
    model = tiny_model().eval()
    with no_grad():
        lp = model.ctc_head(model.encode(np.ones((10, 4))).H).data
    assert lp.shape == (1, 3, 9)
    np.testing.assert_allclose(np.logaddexp.reduce(lp, axis=-1), 0.0, atol=1e-9)


def _asr_posteriors(model, ids, enc, post=None):
    return model.asr_decode_step(model.decoder_inputs(ids, post), enc).data


@pytest.mark.parametrize("seed", range(3))
def test_asr_decoder_causal(seed):
    rng = np.random.default_rng(seed)
    model = tiny_model(seed).eval()
    with no_grad():
        enc = model.encode(rng.normal(size=(16, 4)))
        ids = np.array([[3, 1, 5, 7, 2, 8]])
        base = _asr_posteriors(model, ids, enc)
        np.testing.assert_allclose(np.exp(base).sum(-1), 1.0, atol=1e-9)
        for j in range(1, ids.shape[1]):
            alt = ids.copy()
            alt[0, j] = 4 if ids[0, j] != 4 else 6
            out = _asr_posteriors(model, alt, enc)
            assert np.abs(out[0, :j] - base[0, :j]).max() <= 1e-12


def test_empty_prefix_rejected():
    model = tiny_model().eval()
    with no_grad():
        enc = model.encode(np.ones((8, 4)))
        with pytest.raises(ShapeError):
            model.asr_decode_step(Tensor(np.zeros((1, 0, 8))), enc)


@pytest.mark.parametrize("seed", range(3))
def test_ld_mask_regimes(seed):
    rng = np.random.default_rng(seed)
    model = tiny_model(seed, use_ld=True).eval()
    ids = np.array([[3, 1, 5, 7, 2]])
    with no_grad():
        enc = model.encode(rng.normal(size=(16, 4)))
        causal = model.ld_decode(ids, enc, CAUSAL).data
        full = model.ld_decode(ids, enc, FULL_CONTEXT).data
        np.testing.assert_allclose(causal.sum(-1), 1.0, atol=1e-9)
        np.testing.assert_allclose(full.sum(-1), 1.0, atol=1e-9)
        changed = 0.0
        for j in range(1, 5):
            alt = ids.copy()
            alt[0, j] = 8
            assert np.abs(model.ld_decode(alt, enc, CAUSAL).data[0, :j] - causal[0, :j]).max() <= 1e-12
            changed = max(changed, np.abs(model.ld_decode(alt, enc, FULL_CONTEXT).data[0, :j] - full[0, :j]).max())
        assert changed > 1e-8


def test_ld_uses_its_own_embedding_table():
    model = tiny_model(use_ld=True)
    assert model.ld_decoder.embed.weight is not model.decoder.embed.weight
    assert model.ld_decoder.embed.weight.shape == model.decoder.embed.weight.shape


def test_ld_and_asr_decoders_share_layer_design():
    model = tiny_model(3, use_ld=True).eval()
    asr = model.decoder.parameters()
    ld = model.ld_decoder.parameters()
    assert set(asr) == set(ld)
    for k, p in ld.items():
        if k.startswith("out."):
            p.data = asr[k].data[..., :4].copy()
        else:
            p.data = asr[k].data.copy()
    ids = np.array([[3, 2, 6, 1]])
    with no_grad():
        enc = model.encode(np.random.default_rng(0).normal(size=(10, 4)))
        ld_logits = model.ld_logits(ids, enc.H, enc.lengths, CAUSAL).data
        asr_logits = model.decoder(ids, enc.H, enc.lengths, causal=True).data
    np.testing.assert_allclose(ld_logits, asr_logits[..., :4], atol=1e-12)


def test_lpb_widths_and_contracts():
    cfg = ModelConfig(d_model=256, heads=4, enc_layers=1, dec_layers=1, ld_layers=1, ffn_dim=32,
                      use_ld=True, use_lpb=True, dropout=0.0)
    model = HybridCSASR(cfg)
    assert model.lpb_proj.weight.shape == (260, 256)
    rng = np.random.default_rng(0)
    emb = Tensor(rng.normal(size=(1, 3, 256)))
    p1 = Tensor(np.full((1, 3, 4), 0.25))
    p2 = Tensor(np.array([[[1.0, 0, 0, 0], [0, 1.0, 0, 0], [0.5, 0.5, 0, 0]]]))
    assert model.lpb_augment(emb, p1).shape == (1, 3, 256)
    assert np.abs(model.lpb_augment(emb, p1).data - model.lpb_augment(emb, p2).data).max() > 1e-8
    with pytest.raises(ShapeError):
        model.lpb_augment(emb, Tensor(np.full((1, 2, 4), 0.25)))
    model.lpb_proj.weight.data[:] = 0.0
    model.lpb_proj.bias.data[:] = rng.normal(size=256)
    out = model.lpb_augment(emb, p2).data
    np.testing.assert_array_equal(out, np.broadcast_to(model.lpb_proj.bias.data, out.shape))


def test_lpb_barrier_forward_identity():
    model = tiny_model(use_ld=True, use_lpb=True, lpb_stop_gradient=True)
    p = Tensor(np.random.default_rng(0).dirichlet(np.ones(4), size=(2, 3)))
    assert model.lpb_gradient_barrier(p).data.tobytes() == p.data.tobytes()


def _asr_only_grads(model, batch):
    l_ctc, l_att, _ = model.loss_components(batch)
    return grads_of(model, ops.add(ops.mul(l_ctc, model.cfg.alpha), ops.mul(l_att, 1 - model.cfg.alpha)))


@pytest.mark.parametrize("barrier", [True, False])
def test_asr_loss_reaches_ld_decoder_iff_no_barrier(barrier):
    model = tiny_model(1, use_ld=True, use_lpb=True, lpb_stop_gradient=barrier, beta=0.8)
    g = _asr_only_grads(model, random_batch(np.random.default_rng(0)))
    ld = [v for k, v in g.items() if k.startswith("ld_decoder.")]
    if barrier:
        assert all(not v.any() for v in ld)
    else:
        assert any(np.abs(v).max() > 0 for v in ld)


def test_barrier_blocks_ld_loss_into_encoder():
    model = tiny_model(2, use_ld=True, use_lpb=True, lpb_stop_gradient=True, beta=0.8)
    _, _, l_ld = model.loss_components(random_batch(np.random.default_rng(1)))
    g = grads_of(model, l_ld)
    assert all(not v.any() for k, v in g.items() if k.startswith("encoder."))
    assert any(np.abs(v).max() > 0 for k, v in g.items() if k.startswith("ld_decoder."))


@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_grl_scales_encoder_gradient_of_ld_loss(lam):
    batch = random_batch(np.random.default_rng(2))
    plain = tiny_model(4, use_ld=True, beta=0.5)
    rev = tiny_model(4, use_ld=True, use_grl=True, grl_lambda=lam, beta=0.5)
    _, _, l0 = plain.loss_components(batch)
    _, _, l1 = rev.loss_components(batch)
    assert l0.item() == l1.item()
    g0, g1 = grads_of(plain, l0), grads_of(rev, l1)
    for k in g0:
        if k.startswith("encoder."):
            np.testing.assert_allclose(g1[k], -lam * g0[k], rtol=0, atol=1e-12)
        else:
            np.testing.assert_allclose(g1[k], g0[k], rtol=0, atol=1e-12)


def test_grl_forward_identity():
    model = tiny_model(use_ld=True, use_grl=True, grl_lambda=0.7)
    h = Tensor(np.random.default_rng(0).normal(size=(2, 3, 8)))
    assert model.grl(h).data.tobytes() == h.data.tobytes()


def test_beta_zero_gives_ld_parameters_no_gradient():
    model = tiny_model(5, use_ld=True, beta=0.0)
    total, br = model(random_batch(np.random.default_rng(3)))
    g = grads_of(model, total)
    assert br.l_ld is not None
    assert all(not v.any() for k, v in g.items() if k.startswith("ld_decoder."))


def test_loss_breakdown_reproduces_total():
    model = tiny_model(6, use_ld=True, beta=0.8, alpha=0.3)
    _, br = model(random_batch(np.random.default_rng(4)))
    assert abs(br.total - (0.3 * br.l_ctc + 0.7 * br.l_att + 0.8 * br.l_ld)) <= 1e-12
    base = tiny_model(6)
    _, br0 = base(random_batch(np.random.default_rng(4)))
    assert br0.l_ld is None and abs(br0.total - (0.3 * br0.l_ctc + 0.7 * br0.l_att)) <= 1e-12


def test_baseline_never_runs_ld_decoder():
    model = tiny_model()
    model(random_batch(np.random.default_rng(5)))
    assert model.ld_decoder is None and model.ld_forward_calls == 0


@pytest.mark.parametrize(
    "bad",
    [dict(use_grl=True, use_lpb=True, use_ld=True), dict(use_lpb=True), dict(lpb_stop_gradient=True),
     dict(alpha=1.5), dict(beta=-1.0), dict(d_model=10, heads=4), dict(conv_kernel=4), dict(subsample_factor=3)],
)
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        ModelConfig(**bad).validate()


def test_config_round_trip_and_full_scale():
    cfg = ModelConfig(use_ld=True, beta=0.8)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    big = ModelConfig.full_scale()
    assert (big.d_model, big.heads, big.ffn_dim, big.enc_layers, big.dec_layers) == (256, 4, 2048, 12, 6)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"nope": 1})


def test_positions_and_collate():
    pe = sinusoidal_positions(5, 8)
    assert pe.shape == (5, 8) and pe[0, 0] == 0.0 and pe[0, 1] == 1.0
    from csasr.corpus import CorpusConfig, generate_corpus

    c = generate_corpus(CorpusConfig(n_train=3, n_valid=0, n_test=0))
    utts = c["train"]
    b = collate(utts, c.vocab.sos_eos)
    for i, u in enumerate(utts):
        n = len(u.tokens) - 1
        assert list(b.ys_in[i, :n]) == u.tokens[:-1]
        assert list(b.ys_out[i, :n]) == u.tokens[1:]
        assert list(b.ld_targets[i, :n]) == u.ld_labels[:-1]
        assert b.targets[i] == u.target
