"""VQ-VAE and autoregressive transformer: gradients, causality, quantizer oracle."""

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqnorm import ndgrad as nd
from vqnorm.artransformer import (ARTransformer, ArTrainConfig, TokenSequence, TransformerConfig,
                                  cohort_tokens, raster_flatten, raster_unflatten, sequence_nll,
                                  train_transformer)
from vqnorm.errors import ConfigError, ContractError
from vqnorm.ndgrad import functional as F
from vqnorm.ndgrad.tensor import ShapeError, Tensor
from vqnorm.vqvae import (VQVAE, VqTrainConfig, VqVaeConfig, codebook_usage, nearest_codes,
                          restart_dead_codes, train_vqvae, usage_entropy, vqvae_loss)

from helpers import numeric_grad, rel_error

TINY_VQ = VqVaeConfig(factor=2, residual_blocks=1, channels=3, residual_channels=2, codebook_size=4,
                      embedding_dim=2, dropout=0.0)
TINY_TR = TransformerConfig(vocab_size=5, max_len=7, layers=1, heads=2, width=8, ff_mult=2, dropout=0.0)


def jitter(params, rng, scale=0.3):
    """Random offsets move zero-initialized biases off ReLU kinks."""
    for p in params.values():
        p.data = p.data + rng.normal(0, scale, p.shape)


def check_param_grads(loss_fn, params, names, tol=1e-4):
    """backward() vs finite differences for each named parameter."""
    for p in params.values():
        p.grad = None
    grads = nd.backward(loss_fn(), [params[n] for n in names])
    for n in names:
        num = numeric_grad(lambda: loss_fn().item(), params[n])
        err = rel_error(grads[params[n]], num)
        assert err < tol, f"{n}: relative error {err:.2e}"


# ------------------------------------------------------------------ gradients

@pytest.mark.usefixtures("f64")
class TestBlockGradients:
    def test_transformer_block_all_params(self, rng):
        model = ARTransformer(TINY_TR, seed=3)
        jitter(model.params, rng)
        seqs = rng.integers(0, 4, size=(2, 6))
        check_param_grads(lambda: model.loss(seqs), model.params, sorted(model.params))

    def test_vqvae_encoder(self, rng):
        model = VQVAE(TINY_VQ, seed=1)
        jitter(model.params, rng)
        x = rng.uniform(size=(2, 4, 4, 4))
        proj = Tensor(rng.normal(size=(2, 2, 2, 2, 2)))
        names = [n for n in model.params if n.startswith("enc.")]
        check_param_grads(lambda: F.sum(model.encode(x) * proj), model.params, names)

    def test_vqvae_decoder(self, rng):
        model = VQVAE(TINY_VQ, seed=2)
        jitter(model.params, rng)
        z = nd.parameter(rng.normal(size=(2, 2, 2, 2, 2)))
        target = rng.uniform(size=(2, 1, 4, 4, 4))
        model.params["z"] = z
        names = ["z"] + [n for n in model.params if n.startswith("dec.")]
        check_param_grads(lambda: nd.mse(model.decode(z), target), model.params, names)

    def test_codebook_and_commitment(self, rng):
        model = VQVAE(TINY_VQ, seed=4)
        jitter(model.params, rng)
        x = rng.uniform(size=(2, 4, 4, 4))

        # stop-gradient is an analytic device, so each term is probed on the
        # parameters it is meant to update
        def codebook_term():
            z_e = model.encode(x)
            return nd.mse(model.quantize(z_e)[1], F.stop_gradient(z_e))

        def commitment_term():
            z_e = model.encode(x)
            return 0.25 * nd.mse(z_e, F.stop_gradient(model.quantize(z_e)[1]))

        check_param_grads(codebook_term, model.params, ["codebook"])
        check_param_grads(commitment_term, model.params, ["enc.proj.w", "enc.proj.b", "enc.down0.w"])


def test_vqvae_loss_components(f64, rng):
    x = Tensor(rng.normal(size=(2, 3)))
    x_hat = Tensor(rng.normal(size=(2, 3)))
    z_e, z_q = Tensor(rng.normal(size=(4,))), Tensor(rng.normal(size=(4,)))
    total, parts = vqvae_loss(x, x_hat, z_e, z_q, beta=0.25)
    recon = ((x.data - x_hat.data) ** 2).mean()
    latent = ((z_e.data - z_q.data) ** 2).mean()
    assert parts["reconstruction"] == pytest.approx(recon)
    assert parts["codebook"] == pytest.approx(latent)
    assert parts["commitment"] == pytest.approx(0.25 * latent)
    assert total.item() == pytest.approx(recon + 1.25 * latent)


# ------------------------------------------------------------------ causality

def test_causality_100_cases():
    cfg = TransformerConfig(vocab_size=9, max_len=20, layers=2, heads=2, width=16, dropout=0.3)
    model = ARTransformer(cfg, seed=11)
    r = np.random.default_rng(99)
    for _ in range(100):
        t = int(r.integers(2, cfg.max_len + 1))
        seq = r.integers(0, cfg.vocab_size, size=t)
        j = int(r.integers(0, t))
        other = seq.copy()
        other[j] = (seq[j] + 1 + r.integers(0, cfg.vocab_size - 1)) % cfg.vocab_size
        a = model.causal_forward(seq).data
        b = model.causal_forward(other).data
        assert np.array_equal(a[0, :j], b[0, :j])
        assert not np.array_equal(a[0, j:], b[0, j:])


def test_attention_weights_upper_triangle_zero():
    model = ARTransformer(TINY_TR, seed=0)
    model.causal_forward(np.array([4, 0, 1, 2, 3]))
    for w in model.last_attention:
        assert np.all(np.triu(w[0, 0], k=1) == 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, rtol=1e-6)


# ------------------------------------------------------------------ quantizer

def exhaustive_nearest(z_e, codebook):
    n, c = z_e.shape[:2]
    out = np.zeros((n,) + z_e.shape[2:], dtype=np.int64)
    for b in range(n):
        for cell in itertools.product(*(range(s) for s in z_e.shape[2:])):
            v = z_e[(b, slice(None)) + cell]
            best, best_d = 0, np.inf
            for k, row in enumerate(codebook):
                d = float(((v - row) ** 2).sum())
                if d < best_d:
                    best, best_d = k, d
            out[(b,) + cell] = best
    return out


class TestQuantizer:
    def test_matches_exhaustive_scan(self, rng):
        z = rng.normal(size=(3, 4, 2, 3, 2))
        cb = rng.normal(size=(7, 4))
        np.testing.assert_array_equal(nearest_codes(z, cb), exhaustive_nearest(z, cb))

    def test_ties_go_to_lowest_index(self):
        cb = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
        z = np.zeros((1, 2, 1, 1, 1))
        assert nearest_codes(z, cb).item() == 0
        z[0, 0] = 1.0
        assert nearest_codes(z, cb).item() == 0

    def test_quantize_returns_codebook_rows(self, rng):
        model = VQVAE(TINY_VQ, seed=0)
        z_e = Tensor(rng.normal(size=(2, 2, 2, 2, 2)).astype(np.float32))
        idx, z_q = model.quantize(z_e)
        cb = model.params["codebook"].data
        np.testing.assert_array_equal(np.moveaxis(z_q.data, 1, -1), cb[idx])

    def test_shape_errors(self):
        model = VQVAE(TINY_VQ)
        with pytest.raises(ShapeError):
            model.quantize(Tensor(np.zeros((1, 3, 2, 2, 2), dtype=np.float32)))
        with pytest.raises(ShapeError):
            model.encode(np.zeros((1, 5, 4, 4), dtype=np.float32))

    def test_empty_codebook(self):
        with pytest.raises(ValueError):
            nearest_codes(np.zeros((1, 2, 1, 1, 1)), np.zeros((0, 2)))

    def test_restart_dead_codes_moves_only_unused(self, rng):
        model = VQVAE(TINY_VQ, seed=0)
        before = np.array(model.params["codebook"].data)
        z = rng.normal(size=(1, 2, 2, 2, 2)).astype(np.float32)
        n = restart_dead_codes(model, np.array([5, 0, 3, 0]), z, rng)
        after = model.params["codebook"].data
        assert n == 2
        np.testing.assert_array_equal(after[[0, 2]], before[[0, 2]])
        flat = np.moveaxis(z, 1, -1).reshape(-1, 2)
        for row in after[[1, 3]]:
            assert any(np.array_equal(row, f) for f in flat)

    def test_usage_entropy(self):
        assert usage_entropy(np.array([0, 0])) == 0.0
        assert usage_entropy(np.array([5, 5, 0, 5, 5])) == pytest.approx(np.log(4))


@settings(max_examples=40, deadline=None)
@given(k=st.integers(1, 9), dim=st.integers(1, 5), seed=st.integers(0, 2 ** 16))
def test_quantizer_is_nearest(k, dim, seed):
    r = np.random.default_rng(seed)
    z = r.normal(size=(2, dim, 2, 1, 2))
    cb = r.normal(size=(k, dim))
    idx = nearest_codes(z, cb)
    flat = np.moveaxis(z, 1, -1)
    chosen = ((flat - cb[idx]) ** 2).sum(-1)
    best = ((flat[..., None, :] - cb) ** 2).sum(-1).min(-1)
    np.testing.assert_array_equal(chosen, best)


# ------------------------------------------------------------------ raster

@settings(max_examples=50, deadline=None)
@given(shape=st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), seed=st.integers(0, 999))
def test_raster_round_trip(shape, seed):
    grid = np.random.default_rng(seed).integers(0, 32, size=shape)
    seq = raster_flatten(grid)
    assert seq.tokens.shape == (grid.size,)
    np.testing.assert_array_equal(raster_unflatten(seq), grid)


def test_raster_order_last_axis_fastest():
    grid = np.arange(12).reshape(2, 3, 2)
    np.testing.assert_array_equal(raster_flatten(grid).tokens, np.arange(12))
    assert raster_flatten(grid).tokens[1] == grid[0, 0, 1]
    with pytest.raises(ValueError):
        raster_flatten(np.zeros((2, 2)))


# ------------------------------------------------------------------ transformer API

class TestTransformer:
    def test_log_probs_match_manual_softmax(self):
        model = ARTransformer(TINY_TR, seed=5)
        seq = np.array([[0, 3, 1, 1, 2, 0]])
        lp = model.log_probs(seq)
        logits = model.causal_forward(np.concatenate([[4], seq[0, :-1]])).data[0].astype(np.float64)
        manual = logits[np.arange(6), seq[0]] - np.log(np.exp(logits).sum(-1))
        np.testing.assert_allclose(lp[0], manual, rtol=1e-5, atol=1e-6)
        assert np.all(lp <= 0)
        assert sequence_nll(model, TokenSequence(seq[0], (1, 2, 3))).total == pytest.approx(lp.sum(), rel=1e-6)

    def test_loss_is_mean_nll(self):
        model = ARTransformer(TINY_TR, seed=5)
        seqs = np.array([[0, 3, 1, 1, 2, 0], [1, 1, 1, 2, 2, 2]])
        assert model.loss(seqs).item() == pytest.approx(-model.log_probs(seqs).mean(), rel=1e-5)

    def test_rejects_bad_tokens(self):
        model = ARTransformer(TINY_TR)
        with pytest.raises(IndexError):
            model.log_probs(np.array([[0, 4]]))
        with pytest.raises(ValueError):
            model.log_probs(np.zeros((1, 7), dtype=int))

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            TransformerConfig(width=10, heads=4)
        with pytest.raises(ConfigError):
            VqVaeConfig(factor=8, residual_blocks=2)
        with pytest.raises(ConfigError):
            VqVaeConfig(factor=6)

    def test_fingerprint_tracks_parameters(self):
        a, b = ARTransformer(TINY_TR, seed=1), ARTransformer(TINY_TR, seed=1)
        assert a.fingerprint() == b.fingerprint()
        b.params["head.b"].data = b.params["head.b"].data + 1
        assert a.fingerprint() != b.fingerprint()


# ------------------------------------------------------------------ training

def _toy_volumes(n, seed=0):
    r = np.random.default_rng(seed)
    base = np.zeros((n, 8, 8, 8), dtype=np.float32)
    base[:, 2:6, 2:6, 2:6] = r.uniform(0.4, 0.8, size=(n, 1, 1, 1))
    return base + 0.02 * r.normal(size=base.shape).astype(np.float32)


class TestTraining:
    def test_vqvae_reduces_error_and_is_deterministic(self):
        cfg = VqVaeConfig(factor=2, residual_blocks=1, channels=8, residual_channels=4, codebook_size=8,
                          embedding_dim=4, dropout=0.0)
        tr = VqTrainConfig(epochs=6, batch_size=8, lr=3e-3, holdout=8)
        vols = _toy_volumes(40)
        m1, h1 = train_vqvae(vols, cfg, tr)
        m2, h2 = train_vqvae(vols, cfg, tr)
        assert m1.fingerprint() == m2.fingerprint()
        mse = h1.series("val_mse")
        assert mse[-1] < mse[0]
        usage = codebook_usage(m1, vols)
        assert usage["counts"].sum() == 40 * 64

    def test_transformer_pairs_with_vqvae(self):
        vq = VQVAE(TINY_VQ, seed=0)
        vols = _toy_volumes(10)[:, :4, :4, :4]
        tokens = cohort_tokens(vq, vols)
        assert tokens.shape == (10, 8)
        model, hist = train_transformer(vq, vols, train=ArTrainConfig(epochs=2, batch_size=4, holdout=2))
        assert model.paired_vqvae == vq.fingerprint()
        assert model.config.vocab_size == TINY_VQ.codebook_size + 1
        assert len(hist.epochs) == 2 and "val_nll" in hist.epochs[0]

    def test_transformer_learns_fixed_pattern(self):
        vq = VQVAE(TINY_VQ, seed=0)
        tokens = np.tile(np.array([[0, 1, 2, 3, 0, 1, 2, 3]]), (40, 1))
        _, hist = train_transformer(vq, None, train=ArTrainConfig(epochs=8, batch_size=8, lr=3e-3, holdout=8),
                                    tokens=tokens)
        nll = hist.series("val_nll")
        assert nll[-1] < 0.8 * nll[0]

    def test_contract_errors(self):
        vq = VQVAE(TINY_VQ)
        with pytest.raises(ContractError):
            train_vqvae(np.zeros((0, 4, 4, 4)), TINY_VQ, VqTrainConfig(epochs=1))
        with pytest.raises(ConfigError):
            train_transformer(vq, None, TransformerConfig(vocab_size=9, max_len=9), tokens=np.zeros((4, 8), int))
        with pytest.raises(ContractError):
            train_transformer(vq, None, tokens=np.zeros((0, 8), int))
