import json
import os

import numpy as np
import pytest

from ditquant.cli import main
from ditquant.model import load_checkpoint

SMALL_CFG = {
    "model": {
        "image_size": 8,
        "patch_size": 4,
        "hidden_dim": 16,
        "depth": 1,
        "heads": 2,
        "num_classes": 4,
        "seed": 5,
    },
    "sampler": {"num_inference_steps": 4, "guidance_scale": 3.0},
    "calib": {"num_samples": 2, "seed": 11},
    "probes": {"num_samples": 2, "seed": 12},
    "quant": {
        "bits_act": 8,
        "bits_weight": 4,
        "act_strategy": "one_step",
        "weight_granularity": "per_group",
        "group_size": 8,
    },
}


def write_cfg(tmp_path, overrides=None, name="cfg.json"):
    cfg = json.loads(json.dumps(SMALL_CFG))
    cfg["output_dir"] = str(tmp_path / "out")
    for key, val in (overrides or {}).items():
        if isinstance(val, dict):
            cfg.setdefault(key, {}).update(val)
        else:
            cfg[key] = val
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


def run(*argv):
    return main(list(argv))


@pytest.fixture()
def initialized(tmp_path):
    cfg_path = write_cfg(tmp_path)
    assert run("init", "--config", str(cfg_path)) == 0
    return cfg_path, str(tmp_path / "out" / "checkpoint.dq"), tmp_path / "out"


class TestInit:
    def test_checkpoint_manifest_round_trips_config(self, initialized):
        cfg_path, ckpt, _ = initialized
        model = load_checkpoint(ckpt)
        want = json.loads(cfg_path.read_text())["model"]
        for key, val in want.items():
            assert getattr(model.config, key) == val

    def test_same_config_byte_identical_checkpoints(self, tmp_path):
        c1 = write_cfg(tmp_path, {"output_dir": str(tmp_path / "a")}, name="c1.json")
        c2 = write_cfg(tmp_path, {"output_dir": str(tmp_path / "b")}, name="c2.json")
        assert run("init", "--config", str(c1)) == 0
        assert run("init", "--config", str(c2)) == 0
        a = (tmp_path / "a" / "checkpoint.dq").read_bytes()
        b = (tmp_path / "b" / "checkpoint.dq").read_bytes()
        assert a == b

    def test_corrupted_manifest_reports_field(self, initialized, capsys):
        import struct

        _, ckpt, _ = initialized
        raw = open(ckpt, "rb").read()
        hlen = struct.unpack("<I", raw[8:12])[0]
        header = json.loads(raw[12 : 12 + hlen])
        del header["tensors"]
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        open(ckpt, "wb").write(raw[:8] + struct.pack("<I", len(blob)) + blob)
        rc = run("sample", "--checkpoint", ckpt, "--output-dir", os.path.dirname(ckpt))
        captured = capsys.readouterr()
        assert rc == 2
        assert captured.err.startswith("ditquant: error:")
        assert "tensors" in captured.err

    def test_train_flag_changes_weights(self, tmp_path):
        base = write_cfg(tmp_path, {"output_dir": str(tmp_path / "fp")}, name="cb.json")
        trained = write_cfg(
            tmp_path,
            {"output_dir": str(tmp_path / "tr"), "train": {"steps": 2, "batch": 1}},
            name="ct.json",
        )
        assert run("init", "--config", str(base)) == 0
        assert run("init", "--config", str(trained)) == 0
        a = load_checkpoint(tmp_path / "fp" / "checkpoint.dq")
        b = load_checkpoint(tmp_path / "tr" / "checkpoint.dq")
        assert any(not np.array_equal(a.params[n], b.params[n]) for n in a.params)


class TestCalibrate:
    def test_one_step_ranges_single_step_per_layer(self, initialized):
        cfg_path, ckpt, out = initialized
        assert run("calibrate", "--config", str(cfg_path), "--checkpoint", ckpt) == 0
        lines = (out / "ranges.csv").read_text().strip().split("\n")
        body = [l.split(",") for l in lines[1:]]
        assert len(body) == 6  # depth-1 model: 6 quantizable layers
        assert all(row[1] == "0" for row in body)

    def test_multi_step_rows_match_sampler_steps(self, tmp_path):
        cfg_path = write_cfg(tmp_path, {"quant": {"act_strategy": "multi_step"}})
        assert run("init", "--config", str(cfg_path)) == 0
        ckpt = str(tmp_path / "out" / "checkpoint.dq")
        assert run("calibrate", "--config", str(cfg_path), "--checkpoint", ckpt) == 0
        lines = (tmp_path / "out" / "ranges.csv").read_text().strip().split("\n")
        steps = {int(l.split(",")[1]) for l in lines[1:]}
        assert steps == set(range(SMALL_CFG["sampler"]["num_inference_steps"]))

    def test_weights_csv_emitted_and_reportable(self, initialized, capsys):
        cfg_path, ckpt, out = initialized
        assert run("calibrate", "--config", str(cfg_path), "--checkpoint", ckpt) == 0
        path = out / "weights.csv"
        assert path.read_text().startswith("layer_id,channel,min,max,dispersion\n")
        assert run("report", str(path)) == 0
        assert "dispersion=" in capsys.readouterr().out

    def test_params_file_records_fallbacks(self, tmp_path):
        cfg_path = write_cfg(tmp_path, {"quant": {"group_size": 128}})
        assert run("init", "--config", str(cfg_path)) == 0
        ckpt = str(tmp_path / "out" / "checkpoint.dq")
        assert run("calibrate", "--config", str(cfg_path), "--checkpoint", ckpt) == 0
        payload = json.loads((tmp_path / "out" / "params.json").read_text())
        meta = payload["metadata"]
        assert meta["requested_group_size"] == 128
        assert meta["group_size_fallbacks"]  # every small layer fell back
        assert meta["warnings"]
        for lid, g_eff in meta["group_size_fallbacks"].items():
            assert payload["weights"][lid]["granularity"]["group_size"] == g_eff


class TestSample:
    def test_deterministic_output_files(self, initialized):
        cfg_path, ckpt, out = initialized
        assert run("sample", "--config", str(cfg_path), "--checkpoint", ckpt, "--seed", "3") == 0
        first = (out / "sample_seed3_label0.npy").read_bytes()
        assert run("sample", "--config", str(cfg_path), "--checkpoint", ckpt, "--seed", "3") == 0
        assert (out / "sample_seed3_label0.npy").read_bytes() == first
        assert (out / "sample_seed3_label0.png").exists()

    def test_quantized_run_differs_from_fp(self, initialized):
        cfg_path, ckpt, out = initialized
        assert run("calibrate", "--config", str(cfg_path), "--checkpoint", ckpt) == 0
        assert run("sample", "--config", str(cfg_path), "--checkpoint", ckpt, "--seed", "4") == 0
        fp = np.load(out / "sample_seed4_label0.npy")
        assert (
            run(
                "sample", "--config", str(cfg_path), "--checkpoint", ckpt,
                "--seed", "4", "--params", str(out / "params.json"),
            )
            == 0
        )
        q = np.load(out / "sample_seed4_label0.npy")
        assert not np.array_equal(fp, q)

    def test_per_channel_vs_per_group_outputs_differ(self, tmp_path):
        # g=8 on C_in 16 layers forms real sub-channel groups
        base = {"quant": {"bits_act": 8, "bits_weight": 4, "group_size": 8}}
        cfg_pc = write_cfg(
            tmp_path,
            {**base, "quant": {**base["quant"], "weight_granularity": "per_channel"},
             "output_dir": str(tmp_path / "pc")},
            name="pc.json",
        )
        cfg_pg = write_cfg(
            tmp_path,
            {**base, "quant": {**base["quant"], "weight_granularity": "per_group"},
             "output_dir": str(tmp_path / "pg")},
            name="pg.json",
        )
        assert run("init", "--config", str(cfg_pc)) == 0
        ckpt = str(tmp_path / "pc" / "checkpoint.dq")
        for cfg_path in (cfg_pc, cfg_pg):
            assert run("calibrate", "--config", str(cfg_path), "--checkpoint", ckpt) == 0
            assert (
                run("sample", "--config", str(cfg_path), "--checkpoint", ckpt,
                    "--seed", "6", "--params",
                    str(tmp_path / json.loads(cfg_path.read_text())["output_dir"].split("/")[-1] / "params.json"))
                == 0
            )
        a = np.load(tmp_path / "pc" / "sample_seed6_label0.npy")
        b = np.load(tmp_path / "pg" / "sample_seed6_label0.npy")
        assert not np.array_equal(a, b)

    def test_null_label(self, initialized):
        cfg_path, ckpt, out = initialized
        assert (
            run("sample", "--config", str(cfg_path), "--checkpoint", ckpt, "--label", "null") == 0
        )
        assert (out / "sample_seed0_labelnull.npy").exists()

    def test_bad_label_exits_2(self, initialized, capsys):
        cfg_path, ckpt, _ = initialized
        assert run("sample", "--config", str(cfg_path), "--checkpoint", ckpt, "--label", "9") == 2
        assert capsys.readouterr().err.startswith("ditquant: error:")


class TestCompare:
    def test_five_rows_and_fp_cap(self, initialized):
        cfg_path, ckpt, out = initialized
        assert run("compare", "--config", str(cfg_path), "--checkpoint", ckpt) == 0
        summary = json.loads((out / "summary.json").read_text())
        labels = [r["label"] for r in summary["rows"]]
        assert labels == [
            "fp32",
            "8A8W-multi-step",
            "8A8W-one-step",
            "8A4W-per-channel",
            "8A4W-per-group",
        ]
        fp_row = summary["rows"][0]
        assert fp_row["bits"] == "32fp/32fp"
        assert fp_row["mean_output_sqnr_db"] == 100.0
        bits = [r["bits"] for r in summary["rows"][1:]]
        assert bits == ["8/8", "8/8", "8/4", "8/4"]

    def test_rerun_byte_identical(self, tmp_path):
        cfg_path = write_cfg(tmp_path)
        assert run("init", "--config", str(cfg_path)) == 0
        ckpt = str(tmp_path / "out" / "checkpoint.dq")
        out = tmp_path / "out"
        assert run("compare", "--config", str(cfg_path), "--checkpoint", ckpt) == 0
        first = ((out / "summary.json").read_bytes(), (out / "sqnr.csv").read_bytes())
        assert run("compare", "--config", str(cfg_path), "--checkpoint", ckpt) == 0
        second = ((out / "summary.json").read_bytes(), (out / "sqnr.csv").read_bytes())
        assert first == second

    def test_custom_settings_file(self, initialized):
        cfg_path, ckpt, out = initialized
        settings = [
            {"label": "fp", "fp": True},
            {"label": "w4", "bits_act": 8, "bits_weight": 4, "weight_granularity": "per_channel"},
        ]
        spath = out / "settings.json"
        spath.write_text(json.dumps(settings))
        assert (
            run("compare", "--config", str(cfg_path), "--checkpoint", ckpt,
                "--settings", str(spath)) == 0
        )
        summary = json.loads((out / "summary.json").read_text())
        assert [r["label"] for r in summary["rows"]] == ["fp", "w4"]

    def test_sqnr_csv_schema(self, initialized):
        cfg_path, ckpt, out = initialized
        settings = [{"label": "fp", "fp": True}]
        spath = out / "s.json"
        spath.write_text(json.dumps(settings))
        assert (
            run("compare", "--config", str(cfg_path), "--checkpoint", ckpt,
                "--settings", str(spath)) == 0
        )
        lines = (out / "sqnr.csv").read_text().strip().split("\n")
        assert lines[0] == "setting,unit,step,sqnr_db"
        assert len(lines) == 1 + SMALL_CFG["sampler"]["num_inference_steps"]

    def test_duplicate_labels_rejected(self, initialized, capsys):
        cfg_path, ckpt, out = initialized
        spath = out / "dup.json"
        spath.write_text(json.dumps([{"label": "x", "fp": True}, {"label": "x", "fp": True}]))
        assert (
            run("compare", "--config", str(cfg_path), "--checkpoint", ckpt,
                "--settings", str(spath)) == 2
        )
        assert "label" in capsys.readouterr().err


class TestRenderAndOverrides:
    def test_render_png_modes(self, tmp_path):
        from PIL import Image

        from ditquant.cli import render_png

        rng = np.random.default_rng(0)
        render_png(rng.standard_normal((1, 8, 8)), str(tmp_path / "g.png"))
        render_png(rng.standard_normal((3, 8, 8)), str(tmp_path / "c.png"))
        render_png(np.zeros((1, 8, 8)), str(tmp_path / "z.png"))
        assert Image.open(tmp_path / "g.png").mode == "L"
        assert Image.open(tmp_path / "c.png").mode == "RGB"
        assert Image.open(tmp_path / "c.png").size == (8, 8)

    def test_render_png_deterministic_bytes(self, tmp_path):
        from ditquant.cli import render_png

        x = np.random.default_rng(5).standard_normal((1, 8, 8))
        render_png(x, str(tmp_path / "a.png"))
        render_png(x, str(tmp_path / "b.png"))
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    def test_sampler_flags_override_config(self, initialized):
        cfg_path, ckpt, out = initialized
        assert run("sample", "--config", str(cfg_path), "--checkpoint", ckpt,
                   "--seed", "8", "--steps", "2") == 0
        two_steps = np.load(out / "sample_seed8_label0.npy")
        assert run("sample", "--config", str(cfg_path), "--checkpoint", ckpt,
                   "--seed", "8", "--steps", "2", "--guidance", "0.0") == 0
        no_guidance = np.load(out / "sample_seed8_label0.npy")
        assert run("sample", "--config", str(cfg_path), "--checkpoint", ckpt,
                   "--seed", "8") == 0
        config_steps = np.load(out / "sample_seed8_label0.npy")
        assert not np.array_equal(two_steps, config_steps)
        assert not np.array_equal(two_steps, no_guidance)


class TestReport:
    def test_empty_but_headered(self, tmp_path, capsys):
        path = tmp_path / "ranges.csv"
        path.write_text("layer_id,step,min,max\n")
        assert run("report", str(path)) == 0
        assert "0 rows" in capsys.readouterr().out

    def test_known_fixture_golden_text(self, tmp_path, capsys):
        path = tmp_path / "ranges.csv"
        path.write_text(
            "layer_id,step,min,max\n"
            "head,0,-1.5,2.0\n"
            "head,1,-2.5,1.0\n"
            "patch_embed,0,-0.5,0.5\n"
        )
        assert run("report", str(path)) == 0
        out = capsys.readouterr().out
        assert out == (
            "ranges report: 3 rows\n"
            "  head: steps=2 min=-2.5 max=2\n"
            "  patch_embed: steps=1 min=-0.5 max=0.5\n"
        )

    def test_sqnr_report_text(self, tmp_path, capsys):
        path = tmp_path / "sqnr.csv"
        path.write_text("unit,step,sqnr_db\noutput,0,30.0\noutput,1,10.0\n")
        assert run("report", str(path)) == 0
        out = capsys.readouterr().out
        assert "worst 10.0000 dB at step 1" in out
        assert "mean 20.0000 dB" in out

    def test_weights_report_top_dispersion(self, tmp_path, capsys):
        path = tmp_path / "weights.csv"
        path.write_text(
            "layer_id,channel,min,max,dispersion\n"
            "head,0,-1.0,1.0,2.0\n"
            "head,1,-1.0,50.0,50.0\n"
        )
        assert run("report", str(path)) == 0
        lines = capsys.readouterr().out.strip().split("\n")
        assert lines[1].startswith("  head[1]: dispersion=50")

    def test_malformed_row_names_line(self, tmp_path, capsys):
        path = tmp_path / "ranges.csv"
        path.write_text("layer_id,step,min,max\nhead,0,-1.5,2.0\nhead,not_an_int,0,1\n")
        assert run("report", str(path)) == 2
        assert "line 3" in capsys.readouterr().err

    def test_unknown_header_rejected(self, tmp_path, capsys):
        path = tmp_path / "other.csv"
        path.write_text("a,b\n1,2\n")
        assert run("report", str(path)) == 2
        assert "line 1" in capsys.readouterr().err

    def test_missing_file(self, tmp_path, capsys):
        assert run("report", str(tmp_path / "nope.csv")) == 2
        assert capsys.readouterr().err.startswith("ditquant: error:")


class TestErrorPaths:
    def test_missing_checkpoint(self, tmp_path, capsys):
        cfg_path = write_cfg(tmp_path)
        rc = run("calibrate", "--config", str(cfg_path), "--checkpoint", str(tmp_path / "no.dq"))
        assert rc == 2
        assert capsys.readouterr().err.startswith("ditquant: error:")

    def test_bad_config_json(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text("{broken")
        assert run("init", "--config", str(path)) == 2
        assert "JSON" in capsys.readouterr().err

    def test_unknown_config_field(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"modell": {}}))
        assert run("init", "--config", str(path)) == 2
        assert "modell" in capsys.readouterr().err
