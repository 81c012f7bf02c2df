import json

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from emotts_lab import mmd
from emotts_lab.corpus import CorpusSpec, generate_corpus
from emotts_lab.diffusion import NoiseSchedule, score_matching_loss
from emotts_lab.errors import DomainError, NumericalError, ShapeError
from emotts_lab.models import (
    ToySED,
    ToySER,
    ToyScoreNet,
    grad_check,
    init_uniform_,
    load_checkpoint,
    n_parameters,
    save_checkpoint,
    score_forward,
    sed_forward,
    ser_forward,
)
from emotts_lab.training import Batch, masked_frame_ce
from emotts_lab.tts import TTSBatch, TTSModel, TTSTrainConfig, pad_soft_labels, soft_label_corpus, tts_training_step

F64 = torch.float64


def gen(seed):
    return torch.Generator().manual_seed(seed)


def rand(shape, seed, scale=1.0):
    return torch.randn(*shape, generator=gen(seed), dtype=F64) * scale


@pytest.fixture(scope="module")
def tiny_corpus():
    return generate_corpus(CorpusSpec(n_utterances=6, min_frames=8, max_frames=14, seed=5))


class TestSER:
    def test_duplicated_frames_invariance(self):
        m = init_uniform_(ToySER(), gen(0))
        mel = rand((9, 16), 1)
        a = ser_forward(m, mel)
        b = ser_forward(m, mel.repeat_interleave(2, 0))
        for x, y in zip(a, b):
            torch.testing.assert_close(x, y, rtol=0, atol=1e-13)

    def test_zero_input_zero_bias(self):
        m = init_uniform_(ToySER(), gen(0))
        with torch.no_grad():
            for lin in (m.frame, m.logit_head, m.emb_head):
                lin.bias.zero_()
        _, emb = m(torch.zeros(5, 16, dtype=F64))
        assert bool((emb == 0).all())

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 40))
    def test_probabilities_and_shape(self, seed, n):
        m = init_uniform_(ToySER(), gen(seed % 7))
        logits, emb = m(rand((n, 16), seed, 3.0))
        assert emb.shape == (32,)
        assert abs(float(torch.softmax(logits, -1).detach().sum()) - 1) < 1e-9

    def test_empty_input(self):
        with pytest.raises(DomainError):
            ToySER()(torch.zeros(0, 16, dtype=F64))

    def test_padding_ignored(self):
        m = init_uniform_(ToySER(), gen(2))
        a, b = rand((7, 16), 3), rand((11, 16), 4)
        mel = torch.zeros(2, 11, 16, dtype=F64)
        mel[0, :7], mel[1] = a, b
        logits, emb = m(mel, torch.tensor([7, 11]))
        torch.testing.assert_close(emb[0], m(a)[1], rtol=0, atol=1e-13)


class TestSED:
    @pytest.mark.parametrize("n", [1, 7, 50])
    def test_frame_count_preserved(self, n):
        m = init_uniform_(ToySED(), gen(0))
        logits, style, acts = sed_forward(m, rand((n, 16), n))
        assert logits.shape == (n, 4) and style.shape == (n, 32)
        assert len(acts) == m.n_layers == 4

    def test_constant_input_uniform_logits(self):
        m = init_uniform_(ToySED(), gen(1))
        logits, _, _ = m(torch.full((20, 16), 0.7, dtype=F64))
        torch.testing.assert_close(logits, logits[:1].expand(20, 4), rtol=0, atol=1e-13)

    def test_softmax_rows(self):
        m = init_uniform_(ToySED(), gen(2))
        p = torch.softmax(m(rand((30, 16), 3, 4.0))[0], -1)
        assert float((p.sum(-1) - 1).abs().max().detach()) < 1e-9

    def test_batched_with_padding_matches_unbatched(self):
        m = init_uniform_(ToySED(), gen(3))
        a, b = rand((6, 16), 4), rand((13, 16), 5)
        mel = torch.zeros(2, 13, 16, dtype=F64)
        mel[0, :6], mel[1] = a, b
        logits, style, acts = m(mel, torch.tensor([6, 13]))
        la, sa, aa = m(a)
        torch.testing.assert_close(logits[0, :6], la, rtol=0, atol=1e-13)
        for x, y in zip(acts, aa):
            torch.testing.assert_close(x[0], y, rtol=0, atol=1e-13)

    def test_even_kernel_rejected(self):
        with pytest.raises(DomainError):
            ToySED(kernel=4)


class TestScoreNet:
    def test_zero_head_zero_output(self):
        m = init_uniform_(ToyScoreNet(), gen(0))
        with torch.no_grad():
            m.head.weight.zero_()
            m.head.bias.zero_()
        out = m(rand((10, 16), 1), rand((10, 16), 2), 0.4, rand((10, 32), 3))
        assert bool((out == 0).all())

    @pytest.mark.parametrize("n", [1, 16, 100])
    def test_shape(self, n):
        m = init_uniform_(ToyScoreNet(), gen(0))
        out = score_forward(m, rand((n, 16), 1), rand((n, 16), 2), 0.3, rand((n, 32), 3))
        assert out.shape == (n, 16) and bool(torch.isfinite(out).all())

    def test_batched_per_sample_time(self):
        m = init_uniform_(ToyScoreNet(), gen(4))
        x, mu, zs = rand((3, 5, 16), 1), rand((3, 5, 16), 2), rand((3, 5, 32), 3)
        t = torch.tensor([0.1, 0.5, 0.9], dtype=F64)
        out = m(x, mu, t, zs)
        for i in range(3):
            torch.testing.assert_close(out[i], m(x[i], mu[i], t[i], zs[i]), rtol=0, atol=1e-12)

    def test_nan_rejected(self):
        m = ToyScoreNet()
        x = rand((4, 16), 0)
        x[1, 2] = float("nan")
        with pytest.raises(NumericalError):
            m(x, rand((4, 16), 1), 0.5, rand((4, 32), 2))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            ToyScoreNet()(rand((4, 16), 0), rand((5, 16), 1), 0.5, rand((4, 32), 2))


class TestGradCheck:
    def test_linear_squared_loss(self):
        lin = init_uniform_(nn.Linear(3, 2, dtype=F64), gen(0))
        x, y = rand((6, 3), 1), rand((6, 2), 2)
        assert grad_check(lin, lambda: ((lin(x) - y) ** 2).sum(), fraction=1.0) < 1e-7

    def test_non_finite_loss(self):
        lin = nn.Linear(2, 1, dtype=F64)
        with pytest.raises(NumericalError):
            grad_check(lin, lambda: lin.weight.sum() * float("nan"))

    def test_sed_cross_entropy(self, tiny_corpus):
        m = init_uniform_(ToySED(channels=8, d_style=8), gen(0))
        b = Batch(tiny_corpus[:4])
        err = grad_check(m, lambda: masked_frame_ce(m(b.mel, b.lengths)[0], b.labels, b.mask), generator=gen(1))
        assert err < 1e-4

    def test_score_matching_loss(self):
        sched = NoiseSchedule()
        m = init_uniform_(ToyScoreNet(schedule=sched), gen(0))
        x0, mu, zs = rand((2, 6, 16), 1), rand((2, 6, 16), 2), rand((2, 6, 32), 3)
        t, z = torch.tensor([0.05, 0.7], dtype=F64), rand((2, 6, 16), 4)
        err = grad_check(m, lambda: score_matching_loss(m, x0, mu, zs, t, sched, z=z), generator=gen(5))
        assert err < 1e-4

    @pytest.mark.parametrize("mode", ["mmd", "mmmd", "lmmd", "mlmmd"])
    def test_composite_sed_objective(self, tiny_corpus, mode):
        from emotts_lab.training import adaptation_term

        m = init_uniform_(ToySED(channels=8, d_style=8), gen(0))
        src = Batch([u for u in tiny_corpus if u.domain == "source"][:4])
        tgt = Batch([u for u in tiny_corpus if u.domain == "target"][:4])
        w_s = torch.softmax(rand((4, 4), 6), -1)
        w_t = torch.softmax(rand((4, 4), 7), -1)
        # median bandwidths are detached by design; probe the kernel at fixed sigmas
        cfg = mmd.KernelConfig((0.5, 1.0, 2.0), "fixed")

        def loss():
            logits, _, a_s = m(src.mel, src.lengths)
            _, _, a_t = m(tgt.mel, tgt.lengths)
            ce = masked_frame_ce(logits, src.labels, src.mask)
            return mmd.sed_total_loss(ce, adaptation_term(mode, a_s, a_t, w_s, w_t, cfg), 0.5)

        assert grad_check(m, loss, generator=gen(8)) < 1e-4

    def test_tts_objective(self, tiny_corpus):
        ser = init_uniform_(ToySER(d_style=8), gen(0)).requires_grad_(False)
        sed = init_uniform_(ToySED(channels=8, d_style=8), gen(1)).requires_grad_(False)
        model = init_uniform_(TTSModel(12, 4, d_style=8), gen(2))
        utts = tiny_corpus[:3]
        batch = TTSBatch(utts)
        targets = pad_soft_labels(soft_label_corpus(sed, utts), batch.mel.shape[1])
        cfg = TTSTrainConfig()
        t = torch.tensor([0.1, 0.3, 0.8], dtype=F64)
        z = rand(tuple(batch.mel.shape), 3)

        def loss():
            return tts_training_step(model, ser, sed, batch, targets, cfg, gen(0), t=t, z=z)["total"]

        assert grad_check(model, loss, generator=gen(4)) < 1e-4


class TestSize:
    @pytest.mark.parametrize(
        "factory",
        [ToySER, ToySED, ToyScoreNet, lambda: TTSModel(12, 4)],
        ids=["ser", "sed", "score", "tts"],
    )
    def test_under_50k(self, factory):
        assert n_parameters(factory()) < 50_000


class TestCheckpoints:
    @pytest.mark.parametrize(
        "factory",
        [ToySER, lambda: ToySED(channels=8, n_conv=2), ToyScoreNet, lambda: TTSModel(12, 4, positional=False)],
        ids=["ser", "sed", "score", "tts"],
    )
    def test_round_trip(self, tmp_path, factory):
        m = init_uniform_(factory(), gen(3))
        save_checkpoint(m, tmp_path / "m.json")
        back = load_checkpoint(tmp_path / "m.json")
        assert type(back) is type(m)
        for (n1, a), (n2, b) in zip(m.state_dict().items(), back.state_dict().items()):
            assert n1 == n2 and torch.equal(a, b)
        doc = json.loads((tmp_path / "m.json").read_text())
        assert doc["format_version"] == 1

    def test_shape_validation(self, tmp_path):
        save_checkpoint(ToySED(channels=8), tmp_path / "m.json")
        doc = json.loads((tmp_path / "m.json").read_text())
        doc["config"]["channels"] = 9
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "bad.json")

    def test_version_validation(self, tmp_path):
        save_checkpoint(ToySER(), tmp_path / "m.json")
        doc = json.loads((tmp_path / "m.json").read_text())
        doc["format_version"] = 99
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        with pytest.raises(DomainError):
            load_checkpoint(tmp_path / "bad.json")


def test_forward_is_deterministic():
    m = init_uniform_(ToySED(), gen(9))
    x = rand((12, 16), 10)
    assert torch.equal(m(x)[0], m(x)[0])
    assert np.array_equal(m(x)[1].detach().numpy(), m(x.clone())[1].detach().numpy())
