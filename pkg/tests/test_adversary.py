import math

import numpy as np
import pytest
import torch

from satcross.adversary import (
    AdaptConfig,
    Discriminator,
    Toggles,
    TripletConfig,
    adversarial_losses,
    cosine_distance,
    finetune,
    weighted_triplet_loss,
)
from satcross.corpus import SyntheticCorpusConfig, caption_vocab_size, generate_synthetic_corpus
from satcross.encoders import DualEncoder, EncoderConfig
from satcross.errors import BatchTooSmall, IncompatibleCheckpoint
from satcross.pretrain import ContrastiveConfig, pretrain

from test_encoders import assert_grads_close, fd_gradient


def unit_rows(x):
    t = torch.as_tensor(x, dtype=torch.float64)
    return t / t.norm(dim=1, keepdim=True)


class TestCosineDistance:
    def test_identity(self):
        a = unit_rows([[0.6, 0.8]])
        assert float(cosine_distance(a, a)[0]) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal(self):
        a = torch.tensor([1.0, 0.0], dtype=torch.float64)
        b = torch.tensor([0.0, 1.0], dtype=torch.float64)
        assert float(cosine_distance(a, b)) == pytest.approx(1.0, abs=1e-12)

    def test_antipodal(self):
        a = torch.tensor([1.0, 0.0], dtype=torch.float64)
        assert float(cosine_distance(a, -a)) == pytest.approx(2.0, abs=1e-12)


def triplet_oracle(texts, images, weights, margin):
    """Plain-loop evaluation of the weighted bidirectional hinge."""
    n = len(texts)
    total = 0.0
    for i in range(n):
        d_pos = 1.0 - float(texts[i] @ images[i])
        d_neg_t = min(1.0 - float(texts[i] @ images[j]) for j in range(n) if j != i)
        d_neg_i = min(1.0 - float(texts[j] @ images[i]) for j in range(n) if j != i)
        hinge_t = max(0.0, d_pos - d_neg_t + margin)
        hinge_i = max(0.0, d_pos - d_neg_i + margin)
        total += weights[i] * (hinge_t + hinge_i)
    return total / n


class TestWeightedTripletLoss:
    def _hand_batch(self):
        texts = torch.tensor([[1.0, 0.0], [-1.0, 0.0]], dtype=torch.float64)
        images = torch.tensor([[0.1, math.sqrt(0.99)], [0.8, 0.6]], dtype=torch.float64)
        return texts, images

    def test_satisfied_margin_clamps_to_zero(self):
        # d(a,p)=0.2, d(a,n)=0.9: hinge = [0.2 - 0.9 + 0.2]+ = 0
        texts = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        images = torch.tensor([[0.8, 0.6], [0.1, math.sqrt(0.99)]], dtype=torch.float64)
        w = torch.ones(2, dtype=torch.float64)
        loss = float(weighted_triplet_loss(texts, images, w, margin=0.2))
        assert loss == pytest.approx(
            triplet_oracle(texts, images, [1.0, 1.0], 0.2), abs=1e-12)

    def test_hand_evaluated_hinge(self):
        # anchor text0: d(a,p)=0.9, hardest negative d=0.2 -> hinge 0.9;
        # image anchors contribute 0 and 1.8; text1 contributes 0.9
        texts, images = self._hand_batch()
        w_first = torch.tensor([1.0, 0.0], dtype=torch.float64)
        loss = float(weighted_triplet_loss(texts, images, w_first, margin=0.2))
        assert loss == pytest.approx(0.45, abs=1e-12)
        w_both = torch.ones(2, dtype=torch.float64)
        loss = float(weighted_triplet_loss(texts, images, w_both, margin=0.2))
        assert loss == pytest.approx(1.8, abs=1e-12)

    def test_zero_weights_zero_loss(self):
        rng = np.random.default_rng(0)
        texts = unit_rows(rng.standard_normal((5, 4)))
        images = unit_rows(rng.standard_normal((5, 4)))
        w = torch.zeros(5, dtype=torch.float64)
        assert float(weighted_triplet_loss(texts, images, w, margin=0.2)) == 0.0

    def test_non_negative_and_zero_when_satisfied(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            n = int(rng.integers(2, 8))
            texts = unit_rows(rng.standard_normal((n, 4)))
            images = unit_rows(rng.standard_normal((n, 4)))
            w = torch.as_tensor(rng.uniform(0, 2, size=n))
            assert float(weighted_triplet_loss(texts, images, w, 0.2)) >= 0.0

    def test_matches_oracle_on_random_batches(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            n = int(rng.integers(2, 9))
            texts = unit_rows(rng.standard_normal((n, 5)))
            images = unit_rows(rng.standard_normal((n, 5)))
            w = rng.uniform(0, 2, size=n)
            loss = float(weighted_triplet_loss(
                texts, images, torch.as_tensor(w), margin=0.3))
            assert loss == pytest.approx(
                triplet_oracle(texts, images, w, 0.3), abs=1e-10)

    def test_homogeneous_in_weights(self):
        rng = np.random.default_rng(3)
        texts = unit_rows(rng.standard_normal((4, 4)))
        images = unit_rows(rng.standard_normal((4, 4)))
        w = torch.as_tensor(rng.uniform(0, 2, size=4))
        base = float(weighted_triplet_loss(texts, images, w, 0.2))
        scaled = float(weighted_triplet_loss(texts, images, 3.5 * w, 0.2))
        assert scaled == pytest.approx(3.5 * base, abs=1e-12)

    def test_batch_too_small(self):
        e = unit_rows([[1.0, 0.0]])
        with pytest.raises(BatchTooSmall):
            weighted_triplet_loss(e, e, torch.ones(1, dtype=torch.float64), 0.2)

    def test_random_mining_deterministic_with_rng(self):
        rng_a = np.random.default_rng(4)
        rng_b = np.random.default_rng(4)
        texts = unit_rows(np.random.default_rng(5).standard_normal((6, 4)))
        images = unit_rows(np.random.default_rng(6).standard_normal((6, 4)))
        w = torch.ones(6, dtype=torch.float64)
        a = float(weighted_triplet_loss(texts, images, w, 0.2, mining="random", rng=rng_a))
        b = float(weighted_triplet_loss(texts, images, w, 0.2, mining="random", rng=rng_b))
        assert a == b

    def test_gradient_at_non_kink_points(self):
        rng = np.random.default_rng(7)
        texts = torch.as_tensor(rng.standard_normal((4, 5))).requires_grad_(True)
        images = torch.as_tensor(rng.standard_normal((4, 5))).requires_grad_(True)
        w = torch.as_tensor(rng.uniform(0.5, 1.5, size=4))

        def loss():
            return weighted_triplet_loss(texts, images, w, margin=0.4)

        loss().backward()
        for t in (texts, images):
            assert_grads_close(t.grad.numpy(), fd_gradient(loss, t))


class TestDiscriminator:
    def test_zero_params_half_probability(self):
        disc = Discriminator(embed_dim=4, seed=0)
        with torch.no_grad():
            for p in disc.parameters():
                p.zero_()
        out = disc(torch.randn(3, 4, dtype=torch.float64),
                   torch.randn(3, 4, dtype=torch.float64))
        assert torch.allclose(out, torch.full((3,), 0.5, dtype=torch.float64))

    def test_output_in_open_interval(self):
        disc = Discriminator(embed_dim=6, seed=1)
        rng = np.random.default_rng(8)
        out = disc(torch.as_tensor(rng.standard_normal((1000, 6))),
                   torch.as_tensor(rng.standard_normal((1000, 6))))
        assert (out > 0).all() and (out < 1).all()

    def test_hand_computed_forward(self):
        disc = Discriminator(embed_dim=2, seed=2)
        w0 = np.arange(1, 9).reshape(4, 2) / 10.0   # (2d=4) -> 2
        w1 = np.array([[0.5], [-0.25]])             # 2 -> 1schwer
        w2 = np.array([[2.0]])                      # 1 -> 1
        with torch.no_grad():
            disc.weights[0].copy_(torch.as_tensor(w0))
            disc.weights[1].copy_(torch.as_tensor(w1))
            disc.weights[2].copy_(torch.as_tensor(w2))
            for b in disc.biases:
                b.zero_()
        text = np.array([0.1, 0.2])
        image = np.array([0.3, 0.4])
        h = np.maximum(np.concatenate([text, image]) @ w0, 0.0)
        h = np.maximum(h @ w1, 0.0)
        expected = 1.0 / (1.0 + np.exp(-(h @ w2)[0]))
        out = disc(torch.as_tensor(text).unsqueeze(0),
                   torch.as_tensor(image).unsqueeze(0))
        assert float(out[0]) == pytest.approx(expected, abs=1e-12)


class TestAdversarialLosses:
    def _zero_disc(self, d=4):
        disc = Discriminator(embed_dim=d, seed=3)
        with torch.no_grad():
            for p in disc.parameters():
                p.zero_()
        return disc

    def test_uninformative_discriminator_closed_form(self):
        rng = np.random.default_rng(9)
        disc = self._zero_disc()
        batch = [torch.as_tensor(rng.standard_normal((5, 4))) for _ in range(4)]
        w = torch.ones(5, dtype=torch.float64)
        disc_loss, enc_loss = adversarial_losses(*batch, w, disc)
        assert float(disc_loss) == pytest.approx(2 * math.log(2), abs=1e-12)
        assert float(enc_loss) == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_perfect_discriminator_limit(self):
        disc = self._zero_disc()
        rng = np.random.default_rng(10)
        batch = [torch.as_tensor(rng.standard_normal((4, 4))) for _ in range(4)]
        w = torch.ones(4, dtype=torch.float64)
        with torch.no_grad():
            disc.biases[2].fill_(100.0)  # D -> 1 everywhere
        disc_loss_srchigh, enc_loss_srchigh = adversarial_losses(*batch, w, disc)
        # log D(src) ~ 0 but log(1 - D(tgt)) explodes: clamped, large
        assert float(enc_loss_srchigh) > 10.0 or float(disc_loss_srchigh) > 10.0

    def test_zero_weights(self):
        disc = Discriminator(embed_dim=4, seed=4)
        rng = np.random.default_rng(11)
        batch = [torch.as_tensor(rng.standard_normal((4, 4))) for _ in range(4)]
        w = torch.zeros(4, dtype=torch.float64)
        disc_loss, enc_loss = adversarial_losses(*batch, w, disc)
        assert float(disc_loss) == 0.0 and float(enc_loss) == 0.0

    def test_swapping_batches_swaps_losses(self):
        disc = Discriminator(embed_dim=4, seed=5)
        rng = np.random.default_rng(12)
        src = [torch.as_tensor(rng.standard_normal((6, 4))) for _ in range(2)]
        tgt = [torch.as_tensor(rng.standard_normal((6, 4))) for _ in range(2)]
        w = torch.as_tensor(rng.uniform(0.1, 2.0, size=6))
        d1, e1 = adversarial_losses(src[0], src[1], tgt[0], tgt[1], w, disc)
        d2, e2 = adversarial_losses(tgt[0], tgt[1], src[0], src[1], w, disc)
        assert float(d1) == pytest.approx(float(e2), abs=1e-12)
        assert float(e1) == pytest.approx(float(d2), abs=1e-12)

    def test_homogeneous_in_weights(self):
        disc = Discriminator(embed_dim=4, seed=6)
        rng = np.random.default_rng(13)
        batch = [torch.as_tensor(rng.standard_normal((5, 4))) for _ in range(4)]
        w = torch.as_tensor(rng.uniform(0.1, 1.5, size=5))
        d1, e1 = adversarial_losses(*batch, w, disc)
        d2, e2 = adversarial_losses(*batch, 2.5 * w, disc)
        assert float(d2) == pytest.approx(2.5 * float(d1), abs=1e-12)
        assert float(e2) == pytest.approx(2.5 * float(e1), abs=1e-12)

    def test_discriminator_gradients(self):
        disc = Discriminator(embed_dim=4, seed=7)
        rng = np.random.default_rng(14)
        batch = [torch.as_tensor(rng.standard_normal((3, 4))) for _ in range(4)]
        w = torch.as_tensor(rng.uniform(0.5, 1.5, size=3))

        def loss():
            return adversarial_losses(*batch, w, disc)[0]

        disc.zero_grad()
        loss().backward()
        for name, p in disc.named_parameters():
            assert_grads_close(p.grad.numpy(), fd_gradient(loss, p))

    def test_encoder_adversarial_gradients(self):
        disc = Discriminator(embed_dim=4, seed=8)
        rng = np.random.default_rng(15)
        tensors = [torch.as_tensor(rng.standard_normal((3, 4))).requires_grad_(True)
                   for _ in range(4)]
        w = torch.as_tensor(rng.uniform(0.5, 1.5, size=3))

        def loss():
            return adversarial_losses(*tensors, w, disc)[1]

        loss().backward()
        for t in tensors:
            assert_grads_close(t.grad.numpy(), fd_gradient(loss, t))


def small_pipeline(seed=0, finetune_lr=1e-3, toggles=None, epochs=2):
    corpus_cfg = SyntheticCorpusConfig(
        n_pairs=60, feature_dim=8, n_concepts=4, domain_shift_strength=0.8,
        segments_min=2, segments_max=4, seed=seed)
    source, target = generate_synthetic_corpus(corpus_cfg)
    enc_cfg = EncoderConfig(embed_dim=8, n_heads=2, n_layers=1,
                            vocab_size=caption_vocab_size(4), max_seq_len=16,
                            feature_dim=8, seed=seed)
    model = DualEncoder(enc_cfg)
    pre = pretrain(model, source,
                   ContrastiveConfig(learning_rate=2e-3, epochs=2, batch_size=8),
                   seed=seed)
    adapt = AdaptConfig(finetune_lr=finetune_lr, disc_lr=1e-3, epochs=epochs,
                        target_batch=4, source_batch=20, allow_ratio_override=True)
    result = finetune(pre.model, pre.splits[0], target, adapt,
                      toggles or Toggles(), seed=seed)
    return pre, result


class TestFinetune:
    def test_all_toggles_off_plain_triplet(self):
        _, result = small_pipeline(toggles=Toggles(ss=False, cl=False, at=False))
        for row in result.log:
            assert row["window"] is None
            assert row["adv_enc"] is None and row["adv_disc"] is None
            assert row["wvec_min"] == 1.0 and row["wvec_max"] == 1.0
            assert row["total"] == pytest.approx(row["triplet"], abs=1e-12)

    def test_zero_lr_keeps_checkpoint(self):
        pre, result = small_pipeline(finetune_lr=0.0)
        before = pre.model.state_dict()
        after = result.model.state_dict()
        for k in before:
            assert torch.equal(before[k], after[k])

    def test_deterministic_per_seed(self):
        _, a = small_pipeline(seed=1)
        _, b = small_pipeline(seed=1)
        sa, sb = a.model.state_dict(), b.model.state_dict()
        for k in sa:
            assert torch.equal(sa[k], sb[k])
        assert a.log == b.log

    def test_total_decomposition_at_every_step(self):
        _, result = small_pipeline(toggles=Toggles())
        beta = 1.0
        for row in result.log:
            assert row["total"] == pytest.approx(
                row["triplet"] + beta * row["adv_enc"], abs=1e-9)

    def test_curriculum_windows_advance_per_epoch(self):
        _, result = small_pipeline(epochs=3)
        windows = {tuple(r["window"]) for r in result.log}
        assert (0.0, 0.2) in windows and (0.2, 0.4) in windows

    def test_cl_off_uses_full_window(self):
        _, result = small_pipeline(toggles=Toggles(cl=False))
        assert {tuple(r["window"]) for r in result.log} == {(0.0, 1.0)}

    def test_source_pool_too_small(self):
        corpus_cfg = SyntheticCorpusConfig(
            n_pairs=10, feature_dim=8, n_concepts=4, seed=0)
        source, target = generate_synthetic_corpus(corpus_cfg)
        enc_cfg = EncoderConfig(embed_dim=8, n_heads=2, n_layers=1,
                                vocab_size=caption_vocab_size(4), max_seq_len=16,
                                feature_dim=8, seed=0)
        model = DualEncoder(enc_cfg)
        adapt = AdaptConfig(target_batch=4, source_batch=20, allow_ratio_override=True)
        with pytest.raises(IncompatibleCheckpoint):
            finetune(model, source, target, adapt, Toggles(), seed=0)


class TestAdaptConfig:
    def test_paper_ratio_enforced(self):
        with pytest.raises(ValueError):
            AdaptConfig(target_batch=16, source_batch=64)
        AdaptConfig(target_batch=16, source_batch=64, allow_ratio_override=True)

    def test_disc_lr_defaults_to_ten_x(self):
        cfg = AdaptConfig(finetune_lr=1e-6)
        assert cfg.effective_disc_lr == pytest.approx(1e-5)

    def test_defaults(self):
        cfg = AdaptConfig()
        assert cfg.beta == 1.0
        assert cfg.finetune_lr == 1e-7
        assert cfg.epochs == 5
        assert (cfg.target_batch, cfg.source_batch) == (16, 80)
