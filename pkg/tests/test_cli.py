import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from corrreid import cli, data, encoder as enc, fusion, gcm, lcm, pipeline
from corrreid.config import config_from_dict, load_config
from corrreid.numerics import l2_normalize

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = {
    "seed": 0,
    "encoder": {"embed_dim": 16, "layers": 1, "num_parts": 2},
    "gcm": {"landmarks": 4, "mask_k": 4},
    "fusion": {"r": 4},
    "training": {"epochs_per_stage": 2, "warmup_epochs": 1, "base_lr": 0.01},
    "data": {"synthetic": {"num_ids": 4, "per_id": 6, "image_shape": [8, 16, 1]}},
}


def tiny(**sections):
    raw = json.loads(json.dumps(TINY))
    for key, value in sections.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return raw


def write_config(tmp_path, raw, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(raw))
    return str(p)


def run_all(tmp_path, raw, name="run"):
    cfg_path = write_config(tmp_path, raw, f"{name}.json")
    run = tmp_path / name
    assert cli.main(["train", "--config", cfg_path, "--out", str(run)]) == 0
    assert cli.main(["correlate", "--config", cfg_path, "--in", str(run / "g.mcfr")]) == 0
    assert cli.main(["eval", "--config", cfg_path, "--in", str(run / "z.mcfr")]) == 0
    return run


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("smoke")
    run = tmp / "run"
    cfg = str(CONFIGS / "smoke.json")
    assert cli.main(["train", "--config", cfg, "--out", str(run)]) == 0
    assert cli.main(["correlate", "--config", cfg, "--in", str(run / "g.mcfr")]) == 0
    assert cli.main(["eval", "--config", cfg, "--in", str(run / "z.mcfr")]) == 0
    return run


class TestSmoke:
    def test_three_checkpoints(self, smoke_run):
        names = sorted(p.name for p in (smoke_run / "checkpoints").glob("stage*.npz"))
        assert names == ["stage1.npz", "stage2.npz", "stage3.npz"]

    def test_report_parses(self, smoke_run):
        report = json.loads((smoke_run / "report.json").read_text())
        assert 0.0 <= report["map"] <= 1.0
        assert report["map"] <= report["cmc"]["10"] or report["num_gallery"] > 10

    def test_ranking_table(self, smoke_run):
        lines = (smoke_run / "report_ranking.tsv").read_text().splitlines()
        assert lines[0].split("\t") == ["query_id", "rank", "gallery_id", "similarity", "correct"]

    def test_train_log(self, smoke_run):
        records = [json.loads(x) for x in (smoke_run / "train_log.jsonl").read_text().splitlines()]
        assert {r["stage"] for r in records} == {1, 2, 3}
        assert all(np.isfinite(r["loss"]) for r in records)


class TestExitCodes:
    def test_bad_config(self, tmp_path, capsys):
        code = cli.main(["train", "--config", write_config(tmp_path, {"gcm": {"nope": 1}}),
                         "--out", str(tmp_path / "r")])
        assert code == cli.EXIT_CONFIG
        assert "gcm.nope" in capsys.readouterr().err

    def test_missing_out(self, tmp_path):
        assert cli.main(["train", "--config", write_config(tmp_path, TINY)]) == cli.EXIT_CONFIG

    def test_missing_checkpoint(self, tmp_path):
        data.store_write(np.ones((2, 16)), [0, 1], tmp_path / "g.mcfr")
        code = cli.main(["correlate", "--config", write_config(tmp_path, TINY),
                         "--in", str(tmp_path / "g.mcfr")])
        assert code == cli.EXIT_STATE

    def test_row_mismatch(self, smoke_run, tmp_path):
        data.store_write(np.ones((3, 64)), [0, 1, 2], tmp_path / "z.mcfr")
        code = cli.main(["eval", "--config", str(CONFIGS / "smoke.json"), "--in", str(tmp_path / "z.mcfr"),
                         "--manifest", str(smoke_run / "manifest.jsonl")])
        assert code == cli.EXIT_DATA

    def test_missing_store(self, tmp_path):
        assert cli.main(["eval", "--in", str(tmp_path / "absent.mcfr")]) == cli.EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_is_state_error(self, tmp_path):
        raw = tiny(training={"base_lr": 1e300, "epochs_per_stage": 3})
        code = cli.main(["train", "--config", write_config(tmp_path, raw), "--out", str(tmp_path / "r")])
        assert code == cli.EXIT_STATE


class TestAblations:
    def test_both_off_is_identity(self, tmp_path):
        run = run_all(tmp_path, tiny(ablation={"use_gcm": False, "use_lcm": False}))
        g = data.store_read(run / "g.mcfr")
        z = data.store_read(run / "z.mcfr")
        assert g.features.tobytes() == z.features.tobytes()
        assert not (run / "v.mcfr").exists()

    def test_add_path(self, tmp_path):
        raw = tiny(ablation={"fusion": "add"})
        run = run_all(tmp_path, raw)
        u = data.store_read(run / "u.mcfr").features
        v = data.store_read(run / "v.mcfr").features
        z = data.store_read(run / "z.mcfr").features
        np.testing.assert_allclose(z, l2_normalize(0.5 * (u + v))[0], atol=1e-6)

    def test_concat_width(self, tmp_path):
        run = run_all(tmp_path, tiny(ablation={"fusion": "concat"}))
        assert data.store_read(run / "z.mcfr").features.shape[1] == 32

    def test_in_process_composition(self, tmp_path):
        raw = tiny(store_dtype="float64")
        run = run_all(tmp_path, raw)
        cfg = config_from_dict(raw)
        encoder, gp, lp, mca = pipeline.load_trained(run, cfg)
        (tmp_path / "again").mkdir()
        images, _ = pipeline.prepare_dataset(cfg, tmp_path / "again")
        g, l = enc.encode(images, encoder)
        np.testing.assert_allclose(data.store_read(run / "g.mcfr").features, g, atol=1e-12)
        u = l2_normalize(gcm.gcm_forward(g, gp).u)[0]
        v = lcm.fuse_local(lcm.adapt_parts(l, lp.adapters)[0], lp.reduce)
        z = l2_normalize(fusion.fuse(u, v, mca)[:, :, 0, 0])[0]
        np.testing.assert_allclose(data.store_read(run / "z.mcfr").features, z, atol=1e-12)

    def test_modules_independent(self, tmp_path):
        full = run_all(tmp_path, tiny(store_dtype="float64"), "full")
        lonly = run_all(tmp_path, tiny(store_dtype="float64", ablation={"use_gcm": False}), "lonly")
        gonly = run_all(tmp_path, tiny(store_dtype="float64", ablation={"use_lcm": False}), "gonly")
        np.testing.assert_array_equal(data.store_read(full / "v.mcfr").features,
                                      data.store_read(lonly / "v.mcfr").features)
        np.testing.assert_array_equal(data.store_read(full / "u.mcfr").features,
                                      data.store_read(gonly / "u.mcfr").features)

    def test_separable_data(self, tmp_path):
        raw = tiny(data={"synthetic": {"num_ids": 4, "per_id": 8, "image_shape": [8, 16, 1],
                                       "viewpoint_noise": 0.05, "part_dropout": 0.0}})
        run = run_all(tmp_path, raw)
        assert json.loads((run / "report.json").read_text())["map"] >= 0.95


class TestBench:
    def test_records_monotone(self, smoke_run, tmp_path):
        out = tmp_path / "bench.json"
        assert cli.main(["bench", "--config", str(CONFIGS / "smoke.json"), "--in", str(smoke_run / "g.mcfr"),
                         "--sweep", "1,5,9", "--out", str(out), "--with-map"]) == 0
        recs = json.loads(out.read_text())["records"]
        assert [r["landmarks"] for r in recs] == [1, 5, 9]
        counts = [r["multiplies"] for r in recs]
        assert counts[0] < counts[1] < counts[2]
        analytic = recs[1]["analytic_multiplies"] / recs[0]["analytic_multiplies"]
        assert abs(counts[1] / counts[0] - analytic) <= 0.1 * analytic
        assert all(0 <= r["map"] <= 1 for r in recs)

    def test_skips_out_of_range(self, smoke_run, tmp_path):
        cfg = load_config(CONFIGS / "smoke.json")
        with pytest.warns(UserWarning):
            result = pipeline.run_bench(cfg, smoke_run / "g.mcfr", [1, 999])
        assert [r["landmarks"] for r in result["records"]] == [1]

    def test_dense_ratio_leading_order(self, tmp_path, rng):
        n, d, ell = 512, 64, 8
        data.store_write(rng.normal(size=(n, d)), [0] * n, tmp_path / "g.mcfr")
        cfg = config_from_dict({})
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rec = pipeline.run_bench(cfg, tmp_path / "g.mcfr", [ell])["records"][0]
        # N^2 d / (N^2 l + 2 N d l) = (d / l) / (1 + 2d / N)
        assert rec["dense_to_landmark_ratio"] == pytest.approx((d / ell) / (1 + 2 * d / n), rel=1e-12)
        assert abs(rec["dense_to_landmark_ratio"] - d / ell) <= 0.25 * d / ell


def test_reproducible_report(tmp_path):
    a = run_all(tmp_path, TINY, "a")
    b = run_all(tmp_path, TINY, "b")
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()


def test_seed_override_changes_fingerprint_seeds(tmp_path):
    cfg_path = write_config(tmp_path, TINY)
    args = cli.build_parser().parse_args(["train", "--config", cfg_path, "--seed", "5"])
    assert cli._config(args).seed == 5
