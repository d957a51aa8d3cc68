"""Run-directory orchestration behind the CLI.

A run directory holds::

    config.json            resolved configuration
    manifest.jsonl         dataset records (+ images.bin for synthetic data)
    checkpoints/           stage1.npz, stage2.npz, stage3.npz, bank_part<i>.mcfr
    train_log.jsonl        one JSON record per stage epoch
    g.mcfr, l1.mcfr ...    encoder features of every manifest item
    u.mcfr, v.mcfr, z.mcfr correlated / fused features (correlate)
    report.json, ranking.tsv
"""
import json
import logging
import os
import warnings
from pathlib import Path

import numpy as np
from filelock import FileLock

from corrreid import data, encoder as enc, evaluation, fusion, gcm, lcm, training
from corrreid.config import PipelineConfig
from corrreid.errors import DataError, StateError
from corrreid.numerics import MulCounter, l2_normalize

logger = logging.getLogger(__name__)

STAGE_FILES = ("stage1.npz", "stage2.npz", "stage3.npz")


# ------------------------------------------------------------ checkpoints


def _save_npz(path, arrays, meta):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    os.replace(tmp, path)


def _load_npz(path):
    if not path.exists():
        raise StateError(f"missing checkpoint {path}")
    with np.load(path) as npz:
        meta = json.loads(str(npz["__meta__"]))
        arrays = {k: npz[k] for k in npz.files if k != "__meta__"}
    return arrays, meta


def _split(prefix, arrays):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}


def _join(prefix, arrays):
    return {f"{prefix}.{k}": v for k, v in arrays.items()}


# ------------------------------------------------------------------- data


def prepare_dataset(config, run_dir):
    """Materialize the configured dataset into ``run_dir``; returns images + manifest."""
    run_dir = Path(run_dir)
    if config.data.manifest:
        src = Path(config.data.manifest)
        manifest = data.load_manifest(src)
        images = data.load_images(manifest, base_dir=src.parent)
        data.write_manifest(manifest, run_dir / "manifest.jsonl")
        return images, manifest
    s = config.data.synthetic
    spec = data.SyntheticSpec(
        num_ids=s.num_ids, per_id=s.per_id, image_shape=tuple(s.image_shape),
        viewpoint_noise=s.viewpoint_noise, part_dropout=s.part_dropout,
        seed=config.seed_for("data") if s.seed is None else s.seed,
        patch_size=config.encoder.patch_size, num_parts=config.encoder.num_parts,
        shift_scale=s.shift_scale,
    )
    images, manifest = data.synth_dataset(spec)
    data.write_images(images, run_dir / "images.bin", dtype="<f8")
    data.write_manifest(manifest, run_dir / "manifest.jsonl", image_path="images.bin")
    return images, manifest


def _class_index(labels):
    classes = sorted(set(labels), key=lambda x: (str(type(x)), x))
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[x] for x in labels]), classes


def _store_dtype(config):
    return "<f4" if config.store_dtype == "float32" else "<f8"


# ------------------------------------------------------------------ train


def run_train(config: PipelineConfig, run_dir):
    """All three stages; writes checkpoints, log and encoder feature stores."""
    run_dir = Path(run_dir)
    ckpt = run_dir / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    log_path = run_dir / "train_log.jsonl"
    with FileLock(str(ckpt / ".lock")):
        images, manifest = prepare_dataset(config, run_dir)
        train_idx = manifest.indices("train")
        if train_idx.size == 0:
            raise DataError("manifest has no training records")
        labels, classes = _class_index([manifest.records[i].label for i in train_idx])
        x_train = images[train_idx]
        tcfg = config.training
        ecfg = config.encoder
        params = enc.init_encoder(tuple(images.shape[1:]), ecfg.embed_dim, ecfg.layers,
                                  ecfg.patch_size, ecfg.num_parts, config.seed_for("encoder"),
                                  ecfg.pos_std)
        log_lines = []

        def flush(records):
            log_lines.extend(json.dumps(r, sort_keys=True) for r in records)
            log_path.write_text("\n".join(log_lines) + "\n")

        # stage 1
        def save1(epoch, head):
            _save_npz(ckpt / "stage1.npz", {**_join("encoder", params.arrays()), **_join("head", head)},
                      {"stage": 1, "epoch": epoch, "encoder": params.metadata(),
                       "classes": [str(c) for c in classes], "loss": "identity_cross_entropy"})

        head_g, log1 = training.train_encoder(x_train, labels, params, tcfg,
                                              config.seed_for("training"), on_epoch=save1)
        flush(log1.records)

        # stage 2
        d = ecfg.embed_dim
        g_tr, l_tr = enc.encode(x_train, params)
        gparams = lparams = None
        gtrain = ltrain = None
        if config.ablation.use_gcm:
            gparams = gcm.init_gcm(d, config.gcm.landmarks, config.gcm.mask_k,
                                   config.gcm.affinity_sign, config.seed_for("gcm"))
            gtrain = training.GcmTrainer(gparams, head_g, tcfg)
        if config.ablation.use_lcm:
            c = config.lcm
            lparams = lcm.init_lcm(ecfg.num_parts, d, c.k, c.tau, c.momentum)
            ltrain = training.LcmTrainer(lparams, head_g, tcfg, c, l_tr)

        def save2(epoch):
            arrays, meta = {}, {"stage": 2, "epoch": epoch}
            if gparams is not None:
                arrays.update(_join("gcm", gparams.arrays()))
                meta["gcm"] = {"landmarks": gparams.landmarks, "mask_k": gparams.mask_k,
                               "affinity_sign": gparams.affinity_sign, "seed": gparams.seed}
            if lparams is not None:
                arrays.update(_join("lcm", lparams.arrays()))
                meta["lcm"] = {"k": lparams.k, "tau": lparams.tau, "momentum": lparams.momentum,
                               "bank_epoch": ltrain.bank.epoch}
                for i in range(ltrain.bank.num_parts):
                    data.store_write(ltrain.bank.banks[i], [str(manifest.records[j].label) for j in train_idx],
                                     ckpt / f"bank_part{i + 1}.mcfr",
                                     item_ids=[manifest.records[j].item_id for j in train_idx],
                                     dtype="<f8")
            if tcfg.unfreeze_encoder:
                arrays.update(_join("encoder", params.arrays()))
                meta["encoder"] = params.metadata()
            _save_npz(ckpt / "stage2.npz", arrays, meta)

        training.train_correlation(x_train, labels, params, gtrain, ltrain, tcfg,
                                   tcfg.unfreeze_encoder, on_epoch=save2)
        flush((gtrain.log.records if gtrain else []) + (ltrain.log.records if ltrain else []))

        # stage 3
        if tcfg.unfreeze_encoder:
            g_tr, l_tr = enc.encode(x_train, params)
        u_tr, v_tr = correlated_features(g_tr, l_tr, gparams, lparams)
        mca = None
        if config.ablation.use_lcm and config.ablation.fusion == "mca":
            f = config.fusion
            mca = fusion.init_mca(d, f.r, f.sigmoid_scope, config.seed_for("fusion"))

        def save3(epoch):
            arrays = _join("mca", mca.arrays()) if mca is not None else {}
            _save_npz(ckpt / "stage3.npz", arrays,
                      {"stage": 3, "epoch": epoch, "fusion": config.ablation.fusion,
                       "r": config.fusion.r, "sigmoid_scope": config.fusion.sigmoid_scope,
                       "trained": mca is not None})

        if mca is not None:
            _, log3 = training.train_fusion(u_tr, v_tr, labels, mca, tcfg, config.seed_for("fusion"),
                                            on_epoch=save3, head=head_g if tcfg.shared_head else None)
            flush(log3.records)
        else:
            save3(0)

        # encoder features of every item for the correlate step
        g_all, l_all = enc.encode(images, params)
        ids = manifest.item_ids
        labs = [r.label for r in manifest.records]
        dt = _store_dtype(config)
        data.store_write(g_all, labs, run_dir / "g.mcfr", ids, dt)
        for i in range(ecfg.num_parts):
            data.store_write(l_all[:, i], labs, run_dir / f"l{i + 1}.mcfr", ids, dt)
    return run_dir


def correlated_features(g, l, gparams, lparams, landmark_idx=None):
    """Normalized ``u`` (or ``g`` when the global path is off) and ``v`` (or None)."""
    u = g if gparams is None else l2_normalize(gcm.gcm_forward(g, gparams, landmark_idx).u)[0]
    v = None
    if lparams is not None:
        v = lcm.fuse_local(lcm.adapt_parts(l, lparams.adapters)[0], lparams.reduce)
    return u, v


# -------------------------------------------------------------- correlate


def load_trained(run_dir, config):
    """Encoder, global, local and fusion parameters from a run's checkpoints."""
    ckpt = Path(run_dir) / "checkpoints"
    for name in STAGE_FILES:
        if not (ckpt / name).exists():
            raise StateError(f"missing checkpoint {ckpt / name}")
    a1, m1 = _load_npz(ckpt / "stage1.npz")
    encoder = enc.EncoderParams.from_arrays(_split("encoder", a1), m1["encoder"])
    a2, m2 = _load_npz(ckpt / "stage2.npz")
    if "encoder" in m2:
        encoder = enc.EncoderParams.from_arrays(_split("encoder", a2), m2["encoder"])
    gparams = lparams = mca = None
    if config.ablation.use_gcm:
        if "gcm" not in m2:
            raise StateError("stage-2 checkpoint has no global-correlation parameters")
        ga = _split("gcm", a2)
        gparams = gcm.GcmParams(ga["phi_q"], ga["phi_k"], ga["phi_v"], **m2["gcm"])
    if config.ablation.use_lcm:
        if "lcm" not in m2:
            raise StateError("stage-2 checkpoint has no local-correlation parameters")
        la = _split("lcm", a2)
        meta = m2["lcm"]
        lparams = lcm.LcmParams(la["reduce"], la["adapters"], meta["k"], meta["tau"], meta["momentum"])
        a3, m3 = _load_npz(ckpt / "stage3.npz")
        if config.ablation.fusion == "mca":
            if not m3.get("trained"):
                raise StateError("stage-3 checkpoint holds no trained fusion parameters")
            ma = _split("mca", a3)
            mca = fusion.McaParams(ma["c1"], ma["c2"], m3["r"], m3["sigmoid_scope"])
    return encoder, gparams, lparams, mca


def _read_parts(run_dir, num_parts, n):
    parts = []
    for i in range(num_parts):
        st = data.store_read(Path(run_dir) / f"l{i + 1}.mcfr")
        if st.features.shape[0] != n:
            raise DataError(f"part store l{i + 1} has {st.features.shape[0]} rows, expected {n}")
        parts.append(st.features)
    return np.stack(parts, axis=1)


def run_correlate(config, store_path, out_dir=None):
    """Apply the enabled correlation paths and fusion to an encoder store."""
    store_path = Path(store_path)
    run_dir = store_path.parent
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    encoder, gparams, lparams, mca = load_trained(run_dir, config)
    st = data.store_read(store_path)
    g = st.features
    dt = _store_dtype(config)
    diagnostics = {"use_gcm": config.ablation.use_gcm, "use_lcm": config.ablation.use_lcm,
                   "fusion": config.ablation.fusion}
    if gparams is not None:
        res = gcm.gcm_forward(g, gparams)
        u = l2_normalize(res.u)[0]
        diagnostics["gcm"] = res.diagnostics
    else:
        u = g
    data.store_write(u, st.labels, out_dir / "u.mcfr", st.item_ids, dt)
    if lparams is None:
        z = u
    else:
        l = _read_parts(run_dir, encoder.num_parts, g.shape[0])
        v = lcm.fuse_local(lcm.adapt_parts(l, lparams.adapters)[0], lparams.reduce)
        data.store_write(v, st.labels, out_dir / "v.mcfr", st.item_ids, dt)
        z = l2_normalize(fusion.fuse_vectors(u, v, config.ablation.fusion, mca))[0]
    data.store_write(z, st.labels, out_dir / "z.mcfr", st.item_ids, dt)
    (out_dir / "correlate.json").write_text(json.dumps(diagnostics, indent=2, sort_keys=True) + "\n")
    return out_dir / "z.mcfr"


# ------------------------------------------------------------------- eval


def _find_manifest(config, store_path, manifest_path=None):
    if manifest_path:
        return Path(manifest_path)
    local = Path(store_path).parent / "manifest.jsonl"
    if local.exists():
        return local
    if config.data.manifest:
        return Path(config.data.manifest)
    raise DataError(f"no manifest next to {store_path} and none configured")


def run_eval(config, store_path, out_path=None, manifest_path=None):
    store_path = Path(store_path)
    st = data.store_read(store_path)
    manifest = data.load_manifest(_find_manifest(config, store_path, manifest_path))
    if len(manifest) != st.features.shape[0]:
        raise DataError(f"store has {st.features.shape[0]} rows but manifest has {len(manifest)} records")
    if list(st.item_ids) != manifest.item_ids:
        raise DataError("store item ids do not match manifest order")
    q = manifest.indices("query")
    gidx = manifest.indices("gallery")
    labels = [r.label for r in manifest.records]
    ql = np.array([labels[i] for i in q], dtype=object)
    gl = np.array([labels[i] for i in gidx], dtype=object)
    keep = None
    if config.eval.same_camera_exclusion:
        cams = [r.camera for r in manifest.records]
        keep = evaluation.same_camera_keep(ql, gl, [cams[i] for i in q], [cams[i] for i in gidx])
    report, rankings, sims = evaluation.evaluate(
        st.features[q], st.features[gidx], ql, gl, ranks=tuple(config.eval.ranks), keep=keep,
        fingerprint=evaluation.config_fingerprint(config.to_dict()), seeds=config.seeds())
    out_path = Path(out_path) if out_path else store_path.parent / "report.json"
    evaluation.emit_report(report, out_path)
    evaluation.write_ranking_table(
        out_path.with_name(out_path.stem + "_ranking.tsv"), rankings, sims,
        [manifest.item_ids[i] for i in q], [manifest.item_ids[i] for i in gidx], ql, gl,
        top=config.eval.table_top)
    return report


# ------------------------------------------------------------------ bench


def run_bench(config, store_path, sweep, out_path=None, manifest_path=None, with_map=False):
    """Multiply counts (and optionally mAP) of the landmark affinity path per ``l``."""
    st = data.store_read(store_path)
    g = st.features
    n, d = g.shape
    params_base = None
    try:
        _, params_base, _, _ = load_trained(Path(store_path).parent, config)
    except StateError:
        params_base = None
    if params_base is None:
        params_base = gcm.init_gcm(d, 1, config.gcm.mask_k, config.gcm.affinity_sign,
                                   config.seed_for("gcm"))
    manifest = None
    if with_map:
        manifest = data.load_manifest(_find_manifest(config, store_path, manifest_path))
    records = []
    for ell in sweep:
        if ell < 1 or ell > min(n, d):
            warnings.warn(f"landmark count {ell} outside [1, min(N, d)={min(n, d)}]; skipped")
            continue
        p = gcm.GcmParams(params_base.phi_q, params_base.phi_k, params_base.phi_v, ell,
                          params_base.mask_k, params_base.affinity_sign, params_base.seed)
        tally = MulCounter()
        g_l = gcm.sample_landmarks(g, ell, p.seed)
        gcm.affinity_landmark(g, g_l, p, tally)
        rec = {
            "landmarks": ell,
            "multiplies": tally["affinity"],
            "analytic_multiplies": gcm.landmark_multiplies(n, d, ell),
            "dense_multiplies": gcm.dense_multiplies(n, d),
        }
        rec["dense_to_landmark_ratio"] = rec["dense_multiplies"] / rec["multiplies"]
        if manifest is not None:
            u = l2_normalize(gcm.gcm_forward(g, p).u)[0]
            q, gi = manifest.indices("query"), manifest.indices("gallery")
            labels = np.array([r.label for r in manifest.records], dtype=object)
            rec["map"] = evaluation.mean_ap(evaluation.rank_all(u[q], u[gi])[0], labels[q], labels[gi])
        records.append(rec)
    counts = [r["multiplies"] for r in records]
    if any(b <= a for a, b in zip(counts, counts[1:])):
        raise StateError(f"multiply counts not strictly increasing in landmarks: {counts}")
    result = {"n": n, "d": d, "records": records}
    if out_path:
        Path(out_path).write_text(evaluation.report_json(result))
    return result
