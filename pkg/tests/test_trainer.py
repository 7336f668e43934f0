import numpy as np
import pytest
import torch
from scipy import stats

from cdgan.errors import InvalidConfigError, InvalidLabelError, NonFiniteError
from cdgan.model import ModelConfig
from cdgan.trainer import (
    AdamMoments,
    _apply_adam,
    _phase_named_params,
    d_phase_losses,
    eg_phase_losses,
    TrainConfig,
    adam_update,
    init_state,
    sample_domain_pair,
    train,
    train_step,
)


def snapshot(params):
    return [p.detach().clone() for p in params]


def unchanged(before, params):
    return all(torch.equal(a, p.detach()) for a, p in zip(before, params))


class TestAdam:
    def test_zero_gradient_keeps_param(self):
        p = torch.tensor([1.0, -2.0, 3.0])
        new, mom = adam_update(p, torch.zeros(3), AdamMoments.zeros_like(p), TrainConfig())
        assert torch.equal(new, p)
        assert mom.step == 1

    def test_first_step_hand_value(self):
        # m = 0.5, v = 0.001; bias-corrected both give 1, so the step is lr / (1 + eps)
        cfg = TrainConfig(learning_rate=0.1)
        p = torch.tensor([1.0], dtype=torch.float64)
        new, mom = adam_update(p, torch.tensor([1.0], dtype=torch.float64),
                               AdamMoments.zeros_like(p), cfg)
        assert new.item() == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)
        assert new.item() == pytest.approx(0.9, abs=1e-6)
        assert mom.m.item() == pytest.approx(0.5)
        assert mom.v.item() == pytest.approx(0.001)

    def test_second_step_hand_value(self):
        cfg = TrainConfig(learning_rate=0.1)
        p = torch.tensor([0.0], dtype=torch.float64)
        g1, g2 = 1.0, -2.0
        p1, m1 = adam_update(p, torch.tensor([g1], dtype=torch.float64), AdamMoments.zeros_like(p), cfg)
        p2, _ = adam_update(p1, torch.tensor([g2], dtype=torch.float64), m1, cfg)
        m = 0.5 * (0.5 * g1) + 0.5 * g2
        v = 0.999 * (0.001 * g1 ** 2) + 0.001 * g2 ** 2
        expected = p1.item() - 0.1 * (m / (1 - 0.25)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        assert p2.item() == pytest.approx(expected, abs=1e-12)

    def test_pure(self):
        p = torch.randn(4)
        g = torch.randn(4)
        mom = AdamMoments.zeros_like(p)
        a = adam_update(p, g, mom, TrainConfig())
        b = adam_update(p, g, mom, TrainConfig())
        assert torch.equal(a[0], b[0]) and torch.equal(a[1].m, b[1].m)
        assert torch.count_nonzero(mom.m) == 0

    def test_non_finite_gradient(self):
        p = torch.zeros(2)
        with pytest.raises(NonFiniteError):
            adam_update(p, torch.tensor([0.0, float("nan")]), AdamMoments.zeros_like(p), TrainConfig())

    def test_matches_torch_adam(self):
        torch.manual_seed(0)
        p0 = torch.randn(5, dtype=torch.float64)
        ref = torch.nn.Parameter(p0.clone())
        opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.5, 0.999), eps=1e-8)
        cfg = TrainConfig(learning_rate=1e-2)
        p, mom = p0.clone(), AdamMoments.zeros_like(p0)
        for _ in range(5):
            g = torch.randn(5, dtype=torch.float64)
            ref.grad = g.clone()
            opt.step()
            p, mom = adam_update(p, g, mom, cfg)
        assert torch.allclose(p, ref.detach(), atol=1e-12)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(learning_rate=-1), dict(adam_beta1=1.0),
                                    dict(adam_beta2=-0.1), dict(batch_per_domain=0),
                                    dict(log_every=0), dict(latent_norm="l3")])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfigError):
            TrainConfig(**kw)

    def test_weights_from_dict(self):
        assert TrainConfig(weights={"alpha0": 1.0}).weights.alpha0 == 1.0


class TestDomainPairs:
    def test_two_domains(self):
        rng = np.random.default_rng(0)
        assert {sample_domain_pair(2, rng) for _ in range(200)} == {(0, 1), (1, 0)}

    def test_uniform_over_ordered_pairs(self):
        rng = np.random.default_rng(11)
        counts = {}
        for _ in range(12000):
            pair = sample_domain_pair(4, rng)
            counts[pair] = counts.get(pair, 0) + 1
        expected = {(a, b) for a in range(4) for b in range(4) if a != b}
        assert set(counts) == expected
        assert all(abs(c - 1000) <= 150 for c in counts.values())
        assert stats.chisquare(list(counts.values())).pvalue > 0.01

    def test_deterministic(self):
        a = [sample_domain_pair(5, r) for r in [np.random.default_rng(3)] for _ in range(50)]
        b = [sample_domain_pair(5, r) for r in [np.random.default_rng(3)] for _ in range(50)]
        assert a == b

    def test_too_few_domains(self):
        with pytest.raises(InvalidConfigError):
            sample_domain_pair(1, np.random.default_rng(0))


def batches(ds, a=0, b=1, n=1):
    x = torch.from_numpy(ds.train[a][:n])
    y = torch.from_numpy(ds.train[b][:n])
    return (x, torch.full((n,), a)), (y, torch.full((n,), b))


class TestTrainStep:
    def test_phase_isolation_and_tying(self, small_config, tiny_dataset):
        state = init_state(small_config, TrainConfig(learning_rate=1e-3), tiny_dataset)
        model = state.params
        d_params, eg_params = model.d_parameters(), model.eg_parameters()
        assert not {id(p) for p in d_params} & {id(p) for p in eg_params}
        ba, bb = batches(tiny_dataset)

        d_named, eg_named = _phase_named_params(model)
        before_eg = snapshot(eg_params)
        before_d = snapshot(d_params)
        terms = d_phase_losses(model, ba[0], ba[1], bb[0], bb[1], TrainConfig().weights)
        _apply_adam(state, d_named, terms.composite, TrainConfig(learning_rate=1e-3))
        assert unchanged(before_eg, eg_params)
        assert not unchanged(before_d, d_params)

        before_d = snapshot(d_params)
        terms = eg_phase_losses(model, ba[0], ba[1], bb[0], bb[1], TrainConfig().weights)
        _apply_adam(state, eg_named, terms.composite, TrainConfig(learning_rate=1e-3))
        assert unchanged(before_d, d_params)
        assert model.tying_gap() == 0.0

    def test_full_step(self, small_config, tiny_dataset):
        state = init_state(small_config, TrainConfig(), tiny_dataset)
        ba, bb = batches(tiny_dataset, 2, 3)
        state, d, eg = train_step(state, ba, bb, TrainConfig())
        assert state.iteration == 1
        assert state.loss_history[-1] == (1, d, eg)
        assert d.phase == "D" and eg.phase == "EG"
        assert all(np.isfinite(v) for v in (*d.as_dict().values(), *eg.as_dict().values()))
        assert state.params.tying_gap() == 0.0
        assert eg.rec > 0 and eg.cyc > 0 and eg.lcl > 0

    def test_zero_learning_rate(self, micro_config):
        cfg = TrainConfig(learning_rate=0.0)
        state = init_state(micro_config, cfg)
        before = snapshot(state.params.parameters())
        x = torch.rand(1, 3, 8, 8) * 2 - 1
        y = torch.rand(1, 3, 8, 8) * 2 - 1
        _, d, eg = train_step(state, (x, 0), (y, 1), cfg)
        assert unchanged(before, state.params.parameters())
        assert np.isfinite(d.composite) and np.isfinite(eg.composite)

    def test_same_domain_rejected(self, micro_config):
        state = init_state(micro_config, TrainConfig())
        x = torch.zeros(1, 3, 8, 8)
        with pytest.raises(InvalidLabelError):
            train_step(state, (x, 1), (x, 1), TrainConfig())

    def test_non_finite_loss_names_term(self, micro_config):
        state = init_state(micro_config, TrainConfig())
        x = torch.zeros(1, 3, 8, 8)
        x[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteError) as info:
            train_step(state, (x, 0), (torch.zeros(1, 3, 8, 8), 1), TrainConfig())
        assert info.value.term in ("gan_x", "gan_y", "cls_real", "composite")

    def test_determinism(self, small_config, tiny_dataset):
        cfg = TrainConfig(max_iterations=10, seed=5)
        a = train(cfg, tiny_dataset, small_config)
        b = train(cfg, tiny_dataset, small_config)
        assert [(i, d.as_dict(), e.as_dict()) for i, d, e in a.loss_history] == \
               [(i, d.as_dict(), e.as_dict()) for i, d, e in b.loss_history]


class TestTrain:
    def test_zero_iterations(self, small_config, tiny_dataset):
        state = train(TrainConfig(max_iterations=0), tiny_dataset, small_config)
        assert state.iteration == 0 and state.loss_history == []
        fresh = init_state(small_config, TrainConfig(), tiny_dataset).params
        for p, q in zip(state.params.parameters(), fresh.parameters()):
            assert torch.equal(p, q)

    def test_writes_metrics_and_checkpoints(self, small_config, tiny_dataset, tmp_path):
        cfg = TrainConfig(max_iterations=6, log_every=2, checkpoint_every=3)
        train(cfg, tiny_dataset, small_config, out_dir=tmp_path)
        lines = (tmp_path / "metrics.csv").read_text().splitlines()
        assert lines[0] == ("iteration,gan_x,gan_y,rec,lcl,cls_real,cls_fake,cyc,"
                            "composite_d,composite_eg")
        assert [ln.split(",")[0] for ln in lines[1:]] == ["2", "4", "6"]
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == \
               ["iter_000003.npz", "iter_000006.npz"]

    def test_rejects_small_domains(self, small_config, tiny_dataset):
        with pytest.raises(InvalidConfigError):
            train(TrainConfig(batch_per_domain=100), tiny_dataset, small_config)

    def test_domain_count_mismatch(self, tiny_dataset):
        cfg = ModelConfig(n_domains=3, image_size=16, base_channels=4, disc_depth=3)
        with pytest.raises(InvalidConfigError):
            train(TrainConfig(max_iterations=1), tiny_dataset, cfg)

    def test_domain_marginals_uniform(self, small_config, tiny_dataset):
        seen = []
        state = init_state(small_config, TrainConfig(), tiny_dataset)
        for _ in range(4000):
            seen.extend(sample_domain_pair(4, state.pair_rng))
        counts = np.bincount(seen, minlength=4)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_batch_per_domain(self, small_config, tiny_dataset):
        state = train(TrainConfig(max_iterations=2, batch_per_domain=3), tiny_dataset, small_config)
        assert state.iteration == 2
