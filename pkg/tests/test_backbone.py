import json

import numpy as np
import pytest
import torch

from grcsf.backbone import (
    EarlyStopping,
    ModelConfig,
    TrainConfig,
    build_model,
    load_model,
    parameter_count,
    predict_mask,
    save_model,
    threshold_mask,
    train,
    warmup_lr,
)
from grcsf.errors import ConfigurationError, ValidationError
from grcsf.residual_map import MrmStore, ResidualPair
from grcsf.synthdata import SynthConfig, generate_synthetic_dataset
from helpers import finite_difference_check
from reference_unetpp import ReferenceNestedUNet


def tiny_config(**kw):
    base = dict(input_size=16, depth=2, base_channels=4, rcu_patch_sizes=(2, 4), seed=0)
    base.update(kw)
    return ModelConfig(**base)


def conv_block_params(cin, cout):
    return (cin * cout * 9 + cout) + 2 * cout + (cout * cout * 9 + cout) + 2 * cout


def expected_parameter_count(cfg: ModelConfig) -> int:
    ch = [cfg.base_channels * 2**i for i in range(cfg.depth + 1)]
    total = conv_block_params(1, ch[0]) + sum(conv_block_params(ch[i - 1], ch[i]) for i in range(1, cfg.depth + 1))
    for j in range(1, cfg.depth + 1):
        for i in range(cfg.depth - j + 1):
            total += ch[i + 1] * ch[i] + ch[i]  # up projection
            total += conv_block_params((j + 1) * ch[i], ch[i])
    total += ch[0] + 1
    if cfg.enable_gcu:
        for i in range(cfg.depth):
            c = ch[i]
            r = max(c // cfg.se_reduction, 1)
            total += 2 * (c * r + r + r * c + c)
            total += ch[i + 1] * c + c
    if cfg.enable_rcu:
        rows = list(range(len(cfg.rcu_patch_sizes) - 1, -1, -1))
        for i in rows:
            c = ch[i]
            attn = (c * c + c) + 2 * (c + c) + (c * c + c)
            total += 2 * attn + 2
            if cfg.enable_importance:
                h1, h2 = max(c // 2, 8), max(c // 4, 8)
                total += (c * c + c) + (c * h1 + h1) + (h1 * h2 + h2) + (h2 + 1)
    return total


def random_inputs(cfg, batch=2, seed=0):
    gen = np.random.default_rng(seed)
    shape = (batch, 1, cfg.input_size, cfg.input_size)
    return tuple(torch.tensor(gen.random(shape), dtype=torch.get_default_dtype()) for _ in range(3))


class TestBuild:
    def test_plain_model_matches_reference(self):
        cfg = ModelConfig(enable_gcu=False, enable_rcu=False, seed=3)
        model = build_model(cfg)
        ref = ReferenceNestedUNet(cfg.depth, cfg.base_channels)
        ref.load_state_dict(model.state_dict())
        x, _, _ = random_inputs(cfg)
        model.eval(), ref.eval()
        with torch.no_grad():
            assert torch.equal(model(x), ref(x))
        model.train(), ref.train()
        assert torch.equal(model(x), ref(x))

    def test_deterministic_init(self):
        a = torch.nn.utils.parameters_to_vector(build_model(ModelConfig(seed=5)).parameters())
        b = torch.nn.utils.parameters_to_vector(build_model(ModelConfig(seed=5)).parameters())
        assert torch.equal(a, b)

    @pytest.mark.parametrize(
        "flags", [(True, True, True), (False, False, False), (True, False, False), (True, True, False), (False, True, True)]
    )
    def test_parameter_count_closed_form(self, flags):
        cfg = ModelConfig(enable_gcu=flags[0], enable_rcu=flags[1], enable_importance=flags[2])
        assert parameter_count(build_model(cfg)) == expected_parameter_count(cfg)

    def test_he_init_and_zero_bias(self):
        model = build_model(ModelConfig())
        conv = model.nodes["2_1"][0]
        fan_in = conv.weight[0].numel()
        assert float(conv.weight.detach().std()) == pytest.approx((2 / fan_in) ** 0.5, rel=0.1)
        assert torch.equal(conv.bias, torch.zeros_like(conv.bias))
        assert all(r.w1.item() == 0 and r.w2.item() == 0 for r in model.rcus.values())

    def test_rcu_stage_layout(self):
        model = build_model(ModelConfig())
        assert {k: r.patch_size for k, r in model.rcus.items()} == {"2": 4, "1": 4, "0": 8}

    @pytest.mark.parametrize(
        "kw",
        [dict(input_size=60), dict(rcu_patch_sizes=(4, 4, 3)), dict(rcu_patch_sizes=(4, 4, 8, 8, 8)), dict(loss="l2")],
    )
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigurationError):
            build_model(ModelConfig(**kw))

    def test_divisibility_error_names_stage(self):
        with pytest.raises(ConfigurationError, match=r"\(2, 3\)"):
            ModelConfig(rcu_patch_sizes=(4, 4, 3)).validate()


class TestForward:
    def test_output_range_and_shape(self):
        cfg = ModelConfig()
        model = build_model(cfg).eval()
        x, r1, r2 = random_inputs(cfg)
        with torch.no_grad():
            y = model(x, r1, r2)
        assert y.shape == x.shape and ((y > 0) & (y < 1)).all()

    def test_missing_mrm(self):
        model = build_model(tiny_config())
        with pytest.raises(ValidationError):
            model(torch.rand(1, 1, 16, 16))

    def test_zero_fusion_equals_rcu_disabled(self):
        with_rcu = build_model(ModelConfig(seed=2)).eval()
        without = build_model(ModelConfig(seed=2, enable_rcu=False)).eval()
        without.load_state_dict({k: v for k, v in with_rcu.state_dict().items() if not k.startswith("rcus.")})
        x, r1, r2 = random_inputs(with_rcu.config)
        with torch.no_grad():
            assert torch.equal(with_rcu(x, r1, r2), without(x))

    def test_gcu_row_locality(self):
        cfg = tiny_config(enable_rcu=False)
        full = build_model(cfg).eval()
        partial = build_model(cfg).eval()
        del partial.gcus["1"]
        x, _, _ = random_inputs(cfg)
        ta, tb = {}, {}
        with torch.no_grad():
            full.logits(x, trace=ta)
            partial.logits(x, trace=tb)
        same = [(0, 0), (1, 0), (2, 0), (0, 1)]
        changed = [(1, 1), (0, 2)]
        for node in same:
            assert torch.equal(ta["nodes"][node], tb["nodes"][node]), node
        for node in changed:
            assert not torch.equal(ta["nodes"][node], tb["nodes"][node]), node

    def test_residual_propagates_along_row(self):
        cfg = tiny_config(enable_rcu=False)
        model = build_model(cfg).eval()
        x, _, _ = random_inputs(cfg)
        trace = {}
        with torch.no_grad():
            model.logits(x, trace=trace)
        r0 = trace["residual"][0]
        assert r0.shape == (2, 1, 16, 16) and (r0.abs() <= 1).all()
        assert torch.equal(trace["skip0"][0], r0 * trace["nodes"][0, 0] + trace["nodes"][0, 0])

    @pytest.mark.usefixtures("float64")
    def test_end_to_end_gradients(self):
        cfg = tiny_config(seed=4)
        model = build_model(cfg).double()
        with torch.no_grad():
            for r in model.rcus.values():
                r.w1.fill_(0.7)
                r.w2.fill_(-0.4)
        x, r1, r2 = random_inputs(cfg, batch=2, seed=1)
        y = (torch.rand(2, 1, 16, 16, generator=torch.Generator().manual_seed(0)) < 0.2).double()
        from grcsf.losses import mixed_loss

        params = [p for p in model.parameters()]
        finite_difference_check(lambda: mixed_loss(model(x, r1, r2), y), params, n_samples=20, h=1e-4, rtol=1e-3, seed=0)


class TestPredict:
    def test_threshold_cases(self):
        prob = np.full((4, 4), 0.2)
        assert threshold_mask(prob, 0.5).sum() == 0
        assert threshold_mask(prob, 0.0).all()

    def test_threshold_matches_loop(self):
        prob = np.random.default_rng(0).random((8, 8))
        mask = threshold_mask(prob, 0.37)
        for y in range(8):
            for x in range(8):
                assert mask[y, x] == (1 if prob[y, x] >= 0.37 else 0)

    def test_predict_mask_shapes(self):
        train_s, _, _ = generate_synthetic_dataset(SynthConfig(image_size=16, patch_multiple=4, n_train=4, n_val=0,
                                                               n_test=0, n_patients=2))
        model = build_model(tiny_config(enable_rcu=False))
        masks = predict_mask(model, train_s)
        assert masks.shape == (4, 16, 16) and set(np.unique(masks)) <= {0, 1}


@pytest.fixture(scope="module")
def data():
    cfg = SynthConfig(image_size=16, patch_multiple=4, n_train=16, n_val=4, n_test=0, n_patients=4,
                      lesion_radius_range=(1.5, 3.0), lesions_per_slice_range=(1, 2), lesion_contrast=0.3)
    train_s, val_s, _ = generate_synthetic_dataset(cfg)
    gen = np.random.default_rng(0)
    store = MrmStore({s.key: ResidualPair(gen.random((16, 16)).astype(np.float32),
                                          gen.random((16, 16)).astype(np.float32)) for s in train_s + val_s})
    return train_s, val_s, store


class TestTraining:
    def test_patience(self):
        stopper = EarlyStopping(10)
        losses = [1.0, 0.9] + [0.95] * 10
        stops = [stopper.step(v, e) for e, v in enumerate(losses)]
        assert stops[-1] and not any(stops[:-1])
        assert stopper.best_epoch == 1

    def test_warmup_schedule(self):
        cfg = TrainConfig(lr=1e-3, warmup_epochs=5, warmup_factor=10)
        assert warmup_lr(0, 10, cfg) == pytest.approx(1e-4)
        assert warmup_lr(25, 10, cfg) == pytest.approx(0.55e-3)
        assert warmup_lr(50, 10, cfg) == 1e-3 and warmup_lr(500, 10, cfg) == 1e-3
        lrs = [warmup_lr(s, 10, cfg) for s in range(60)]
        assert all(b >= a for a, b in zip(lrs, lrs[1:]))

    def test_deterministic(self, data):
        train_s, val_s, store = data
        runs = []
        for _ in range(2):
            res = train(build_model(tiny_config()), train_s, val_s, store, TrainConfig(max_epochs=2, batch_size=4))
            runs.append(res.history)
        assert runs[0] == runs[1]

    def test_loss_decreases(self, data, tmp_path):
        train_s, val_s, store = data
        model = build_model(tiny_config())
        res = train(model, train_s, val_s, store, TrainConfig(max_epochs=5, batch_size=4, warmup_epochs=1),
                    history_path=tmp_path / "h.jsonl", checkpoint_path=tmp_path / "best.ckpt")
        assert res.history[-1]["train_loss"] < res.history[0]["train_loss"]
        lines = (tmp_path / "h.jsonl").read_text().splitlines()
        assert len(lines) == 5 and set(json.loads(lines[0])) == {"epoch", "train_loss", "val_loss", "lr"}
        best = load_model(tmp_path / "best.ckpt")
        assert best.config == model.config

    def test_errors(self, data):
        train_s, val_s, store = data
        with pytest.raises(ConfigurationError):
            train(build_model(tiny_config()), [], val_s, store)
        with pytest.raises(ValidationError, match=train_s[0].key):
            train(build_model(tiny_config()), train_s, val_s, MrmStore())


def test_checkpoint_round_trip(tmp_path):
    model = build_model(tiny_config(seed=9)).eval()
    save_model(tmp_path / "m.ckpt", model)
    loaded = load_model(tmp_path / "m.ckpt")
    x, r1, r2 = random_inputs(model.config)
    with torch.no_grad():
        assert torch.equal(model(x, r1, r2), loaded(x, r1, r2))
