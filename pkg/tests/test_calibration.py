import numpy as np
import pytest

from ditquant.calibration import (
    CalibSet,
    CalibrationRecord,
    CalibrationStrategy,
    calibrate_pipeline,
    collect_ranges,
    derive_act_params,
    derive_weight_params,
    fallback_group_size,
    records_from_jsonl,
    records_to_jsonl,
)
from ditquant.diffusion import SamplerConfig, forward_diffuse, linear_beta_schedule
from ditquant.errors import ConfigError, ContractError, ShapeError
from ditquant.model import ModelConfig, init_model
from ditquant.quant import (
    Granularity,
    fake_quant,
    make_grid,
    quantize_weights,
    scale_from_range,
)

SMALL = ModelConfig(
    image_size=8, patch_size=4, channels=1, hidden_dim=16, depth=1, heads=2, num_classes=4, seed=3
)


@pytest.fixture(scope="module")
def sched():
    return linear_beta_schedule(1000, 1e-4, 0.02)


def small_model():
    return init_model(SMALL)


class TestStrategy:
    def test_one_step_is_step_zero(self):
        s = CalibrationStrategy.one_step()
        assert s.active_steps(50) == (0,)

    def test_multi_step_defaults_to_all(self):
        s = CalibrationStrategy.multi_step()
        assert s.active_steps(5) == (0, 1, 2, 3, 4)

    def test_multi_step_subset_validated(self):
        s = CalibrationStrategy.multi_step([0, 3])
        assert s.active_steps(5) == (0, 3)
        with pytest.raises(ConfigError):
            s.active_steps(3)


class TestCalibSet:
    def test_generate_deterministic(self):
        a = CalibSet.generate(5, 42, 10)
        b = CalibSet.generate(5, 42, 10)
        assert a.pairs == b.pairs
        assert all(0 <= label < 10 for _, label in a.pairs)

    def test_non_empty_enforced(self):
        with pytest.raises(ConfigError):
            CalibSet(())
        with pytest.raises(ConfigError):
            CalibSet.generate(0, 1, 10)


class TestRecords:
    def test_merge_min_max_and_count(self):
        a = CalibrationRecord("x", {0: -1.0}, {0: 2.0}, 3)
        b = CalibrationRecord("x", {0: -4.0, 1: 0.0}, {0: 1.0, 1: 5.0}, 2)
        m = a.merge(b)
        assert m.step_mins == {0: -4.0, 1: 0.0}
        assert m.step_maxs == {0: 2.0, 1: 5.0}
        assert m.sample_count == 5

    def test_merge_layer_mismatch(self):
        with pytest.raises(ContractError):
            CalibrationRecord("x").merge(CalibrationRecord("y"))

    def test_jsonl_round_trip(self):
        recs = [
            CalibrationRecord("a", {0: -1.5, 1: -0.25}, {0: 1.0, 1: 3.0}, 4),
            CalibrationRecord("b", {0: 0.0}, {0: 0.0}, 1),
        ]
        back = records_from_jsonl(records_to_jsonl(recs))
        assert [r.to_dict() for r in back] == [r.to_dict() for r in recs]


class TestCollectRanges:
    def test_one_step_has_single_entry_per_layer(self, sched):
        model = small_model()
        cfg = SamplerConfig(num_inference_steps=10)
        calib = CalibSet.generate(2, 7, SMALL.num_classes)
        records = collect_ranges(model, sched, cfg, calib, CalibrationStrategy.one_step())
        assert len(records) == len(model.enumerate_layers())
        for rec in records:
            assert rec.steps() == [0]
            assert rec.step_mins[0] <= rec.step_maxs[0]
            assert rec.sample_count == 2 * 2  # cond + uncond per calib sample

    def test_multi_step_covers_fifty_steps(self, sched):
        model = small_model()
        cfg = SamplerConfig(num_inference_steps=50)
        calib = CalibSet(((123, 1),))
        records = collect_ranges(model, sched, cfg, calib, CalibrationStrategy.multi_step())
        for rec in records:
            assert rec.steps() == list(range(50))

    def test_single_sample_matches_instrumented_oracle(self, sched):
        # capture the layer input by hand and scan it
        model = small_model()
        cfg = SamplerConfig(num_inference_steps=4)
        seed, label = 99, 2
        records = collect_ranges(
            model, sched, cfg, CalibSet(((seed, label),)), CalibrationStrategy.one_step()
        )
        captured = {}

        def grab(layer_id, x):
            captured.setdefault(layer_id, []).append(x.copy())

        x_T = np.random.default_rng(seed).standard_normal(model.sample_shape)
        model.observer = grab
        try:
            model.forward(x_T, 1000, label)
            model.forward(x_T, 1000, model.null_label)
        finally:
            model.observer = None
        for rec in records:
            stacked = np.concatenate([a.reshape(-1) for a in captured[rec.layer_id]])
            assert rec.step_mins[0] == stacked.min()
            assert rec.step_maxs[0] == stacked.max()

    def test_order_and_partition_invariance(self, sched):
        model = small_model()
        cfg = SamplerConfig(num_inference_steps=3)
        pairs = CalibSet.generate(3, 5, SMALL.num_classes).pairs
        strategy = CalibrationStrategy.multi_step()

        full = collect_ranges(model, sched, cfg, CalibSet(pairs), strategy)
        rev = collect_ranges(model, sched, cfg, CalibSet(pairs[::-1]), strategy)
        parts = [
            collect_ranges(model, sched, cfg, CalibSet((p,)), strategy) for p in pairs
        ]
        merged = parts[0]
        for part in parts[1:]:
            merged = [a.merge(b) for a, b in zip(merged, part)]
        for f, r, m in zip(full, rev, merged):
            assert f.step_mins == r.step_mins == m.step_mins
            assert f.step_maxs == r.step_maxs == m.step_maxs

    def test_rejects_hooked_model(self, sched):
        model = small_model()
        wp, _ = quantize_weights(model.weight("head"), 8, Granularity.per_channel(0))
        model.attach_fake_quant("head", weight_params=wp)
        with pytest.raises(ContractError):
            collect_ranges(
                model,
                sched,
                SamplerConfig(num_inference_steps=2),
                CalibSet(((1, 0),)),
                CalibrationStrategy.one_step(),
            )


class TestDeriveActParams:
    def test_one_step_range_formula(self):
        rec = CalibrationRecord("x", {0: -4.0}, {0: 2.0}, 1)
        p = derive_act_params(rec, 8, CalibrationStrategy.one_step())
        assert p.scales.tolist() == [4.0 / 128.0]
        assert p.granularity.kind == "per_tensor"

    def test_multi_step_union_rule(self):
        rec = CalibrationRecord("x", {0: -1.0, 1: -4.0}, {0: 1.0, 1: 2.0}, 2)
        p = derive_act_params(rec, 8, CalibrationStrategy.multi_step())
        grid = make_grid(8, True)
        assert p.scales.tolist() == [scale_from_range(-4.0, 2.0, grid)]

    def test_all_zero_sentinel(self):
        rec = CalibrationRecord("x", {0: 0.0}, {0: 0.0}, 1)
        p = derive_act_params(rec, 8, CalibrationStrategy.one_step())
        assert p.scales.tolist() == [1.0]

    def test_empty_record_rejected(self):
        with pytest.raises(ShapeError):
            derive_act_params(CalibrationRecord("x"), 8, CalibrationStrategy.one_step())


class TestDeriveWeightParams:
    def test_fallback_group_sizes(self):
        assert fallback_group_size(64, 128) == 64
        assert fallback_group_size(256, 128) == 128
        assert fallback_group_size(48, 32) == 24
        assert fallback_group_size(97, 10) == 1
        assert fallback_group_size(16, 16) == 16

    def test_group_128_on_small_layers_equals_per_channel(self):
        model = small_model()
        grouped = derive_weight_params(model, 8, Granularity.per_group(128))
        channel = derive_weight_params(model, 8, Granularity.per_channel(0))
        for h in model.enumerate_layers():
            g, c = grouped[h.layer_id], channel[h.layer_id]
            # every small C_in falls back to C_in, i.e. per-channel scales
            assert g.granularity.group_size == model.weight(h.layer_id).shape[1]
            assert np.array_equal(g.scales, c.scales)

    def test_grouped_params_beat_per_channel_on_outliers(self):
        model = small_model()
        rng = np.random.default_rng(13)
        for h in model.enumerate_layers():
            w = model.params[h.layer_id + ".weight"]
            mask = rng.random(w.shape) < 0.05
            w[mask] *= 50.0
        model._rebuild_weight_cache()
        grouped = derive_weight_params(model, 4, Granularity.per_group(4))
        channel = derive_weight_params(model, 4, Granularity.per_channel(0))
        err_g = err_c = 0.0
        for h in model.enumerate_layers():
            w = model.weight(h.layer_id)
            err_g += float(np.sum((fake_quant(w, grouped[h.layer_id]) - w) ** 2))
            err_c += float(np.sum((fake_quant(w, channel[h.layer_id]) - w) ** 2))
        assert err_g < err_c

    def test_8bit_error_bound_on_unclipped(self):
        model = small_model()
        params = derive_weight_params(model, 8, Granularity.per_group(8))
        for h in model.enumerate_layers():
            w = model.weight(h.layer_id)
            p = params[h.layer_id]
            w_hat = fake_quant(w, p)
            g = p.granularity.group_size
            scales = p.scales.reshape(-1)[:, None]
            rows = w.reshape(-1, g)
            rows_hat = w_hat.reshape(-1, g)
            unclipped = np.abs(rows) <= scales * p.grid.c_max
            assert np.all(np.abs(rows_hat - rows)[unclipped] <= scales.repeat(g, 1)[unclipped] / 2)


class TestPipeline:
    def test_hooks_attached_and_sampler_runs(self, sched):
        from ditquant.diffusion import sample

        model = small_model()
        cfg = SamplerConfig(num_inference_steps=4)
        calib = CalibSet.generate(2, 21, SMALL.num_classes)
        handle = calibrate_pipeline(
            model, sched, cfg, calib, CalibrationStrategy.one_step(), 8, 8,
            Granularity.per_channel(0),
        )
        assert set(handle.act_params) == {h.layer_id for h in model.enumerate_layers()}
        assert set(handle.weight_params) == set(handle.act_params)
        assert model.has_hooks
        out = sample(model, sched, cfg, 1, seed=5)
        assert out.shape == model.sample_shape
        assert np.all(np.isfinite(out))

    def test_detach_restores_fp_bitwise(self, sched):
        model = small_model()
        cfg = SamplerConfig(num_inference_steps=3)
        x = np.random.default_rng(2).standard_normal(model.sample_shape)
        baseline = model.forward(x, 100, 1)
        handle = calibrate_pipeline(
            model, sched, cfg, CalibSet.generate(2, 3, SMALL.num_classes),
            CalibrationStrategy.one_step(), 8, 4, Granularity.per_group(128),
        )
        assert not np.array_equal(model.forward(x, 100, 1), baseline)
        handle.detach_all()
        assert np.array_equal(model.forward(x, 100, 1), baseline)

    def test_8a4w_per_group_configuration_constructed(self, sched):
        model = small_model()
        cfg = SamplerConfig(num_inference_steps=2)
        handle = calibrate_pipeline(
            model, sched, cfg, CalibSet.generate(1, 9, SMALL.num_classes),
            CalibrationStrategy.one_step(), 8, 4, Granularity.per_group(128),
        )
        assert handle.bits_act == 8 and handle.bits_weight == 4
        for p in handle.weight_params.values():
            assert p.grid.bits == 4
            assert p.granularity.kind == "per_group"


class TestContainmentAndRobustness:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_one_step_ranges_within_multi_step_union(self, sched, seed):
        model = small_model()
        cfg = SamplerConfig(num_inference_steps=5)
        calib = CalibSet.generate(2, seed, SMALL.num_classes)
        one = collect_ranges(model, sched, cfg, calib, CalibrationStrategy.one_step())
        multi = collect_ranges(model, sched, cfg, calib, CalibrationStrategy.multi_step())
        for o, m in zip(one, multi):
            lo_o, hi_o = o.union_range()
            lo_m, hi_m = m.union_range()
            assert lo_m <= lo_o and hi_o <= hi_m

    def test_max_noise_scale_dominates_synthetic_scenario(self, sched):
        # x0 = 0 makes range growth in the noise level literally true
        grid = make_grid(8, True)
        eps = np.random.default_rng(6).standard_normal((4, 4))
        x0 = np.zeros((4, 4))
        ts = list(range(100, 1001, 100))
        scales = []
        for t in ts:
            x_t = forward_diffuse(x0, t, eps, sched)
            scales.append(scale_from_range(float(x_t.min()), float(x_t.max()), grid))
        assert all(scales[-1] >= s for s in scales)
        assert scales == sorted(scales)
