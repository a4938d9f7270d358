"""Retrieval evaluation: cosine matching, CMC and mAP over repeated random
gallery splits, similarity histograms and the ablation harness."""

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch

from . import alignment as al
from . import generation as gn
from .generation import IR, RGB
from .synth_data import DatasetManifest, body_masks, render_ir, render_rgb, sample_jitter

_EPS_NORM = 1e-12


class ProtocolError(ValueError):
    pass


def cosine_similarity_matrix(q: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities, [|Q| x |G|], entries in [-1, 1]."""
    q = np.asarray(q, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    qn = np.linalg.norm(q, axis=1)
    gn = np.linalg.norm(g, axis=1)
    if (qn <= _EPS_NORM).any() or (gn <= _EPS_NORM).any():
        raise ValueError("zero-norm feature row; cosine similarity undefined")
    sim = (q / qn[:, None]) @ (g / gn[:, None]).T
    return np.clip(sim, -1.0, 1.0)


def _check_ids(query_ids, gallery_ids):
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    missing = sorted(set(query_ids.tolist()) - set(gallery_ids.tolist()))
    if missing:
        raise ProtocolError(f"query identities absent from gallery: {missing}")
    return query_ids, gallery_ids


def cmc(sim: np.ndarray, query_ids, gallery_ids, max_rank: int = 20) -> np.ndarray:
    """CMC(k): fraction of queries whose first correct match ranks <= k.

    Ties are broken by stable gallery index order.
    """
    query_ids, gallery_ids = _check_ids(query_ids, gallery_ids)
    n_q = sim.shape[0]
    hits = np.zeros(max_rank, dtype=np.float64)
    for i in range(n_q):
        order = np.argsort(-sim[i], kind="stable")
        correct = gallery_ids[order] == query_ids[i]
        first = int(np.flatnonzero(correct)[0])  # guaranteed nonempty by _check_ids
        if first < max_rank:
            hits[first] += 1
    return np.cumsum(hits) / n_q


def map_score(sim: np.ndarray, query_ids, gallery_ids) -> float:
    """Mean average precision: per query, mean precision at each relevant hit."""
    query_ids, gallery_ids = _check_ids(query_ids, gallery_ids)
    aps = []
    for i in range(sim.shape[0]):
        order = np.argsort(-sim[i], kind="stable")
        correct = gallery_ids[order] == query_ids[i]
        hit_positions = np.flatnonzero(correct)
        precisions = (np.arange(len(hit_positions)) + 1.0) / (hit_positions + 1.0)
        aps.append(precisions.mean())
    return float(np.mean(aps))


# ---------------------------------------------------------------------------
# repeated-split protocol


@dataclass
class EvalReport:
    shot: str
    repeats: int
    seed: int
    probe_modality: str
    mode: str                 # reserved; only "all-search" is produced
    max_rank: int
    cmc_per_repeat: list      # repeats x max_rank
    map_per_repeat: list
    cmc_mean: list
    map_mean: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def _test_items(model, manifest: DatasetManifest, modality: str):
    records = manifest.records_for(split="test", modality=modality)
    if not records:
        raise ProtocolError(f"test split has no {modality} images")
    pixels = np.stack([manifest.load_pixels(r) for r in records])
    feats = al.extract_features_numpy(model, pixels)
    ids = np.array([r.identity for r in records])
    cams = np.array([r.camera for r in records])
    return feats, ids, cams


def sample_gallery(ids, cams, shot: str, rng: np.random.Generator) -> np.ndarray:
    """Indices of the gallery items for one repeat.

    single: one image per identity per camera present; multi: up to 10 per
    identity per camera (all images when fewer are available).
    """
    per_shot = 1 if shot == "single" else 10
    chosen = []
    for identity in np.unique(ids):
        for camera in np.unique(cams[ids == identity]):
            pool = np.flatnonzero((ids == identity) & (cams == camera))
            take = min(per_shot, pool.size)
            chosen.extend(rng.choice(pool, size=take, replace=False))
    return np.sort(np.asarray(chosen, dtype=np.int64))


def evaluate_protocol(model: al.AlignmentModel, manifest: DatasetManifest, shot: str = "single",
                      repeats: int = 10, seed: int = 0, probe_modality: str = IR,
                      max_rank: int = 20) -> EvalReport:
    """CMC/mAP averaged over repeated random gallery splits.

    Probes are the full test set of `probe_modality`; galleries are sampled
    from the other modality per the shot setting. Features are extracted once
    per unique image and reused across repeats.
    """
    if shot not in ("single", "multi"):
        raise ValueError(f"unknown shot setting {shot!r}")
    gallery_modality = RGB if probe_modality == IR else IR
    q_feats, q_ids, _ = _test_items(model, manifest, probe_modality)
    g_feats, g_ids, g_cams = _test_items(model, manifest, gallery_modality)

    lacking = sorted(set(q_ids.tolist()) - set(g_ids.tolist()))
    if lacking:
        raise ProtocolError(f"test identities lacking {gallery_modality} images: {lacking}")

    cmc_rows, map_rows = [], []
    for repeat in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 3, repeat)))
        g_idx = sample_gallery(g_ids, g_cams, shot, rng)
        sim = cosine_similarity_matrix(q_feats, g_feats[g_idx])
        cmc_rows.append(cmc(sim, q_ids, g_ids[g_idx], max_rank).tolist())
        map_rows.append(map_score(sim, q_ids, g_ids[g_idx]))
    cmc_mean = np.mean(np.asarray(cmc_rows), axis=0).tolist()
    return EvalReport(shot=shot, repeats=repeats, seed=seed, probe_modality=probe_modality,
                      mode="all-search", max_rank=max_rank, cmc_per_repeat=cmc_rows,
                      map_per_repeat=map_rows, cmc_mean=cmc_mean,
                      map_mean=float(np.mean(map_rows)))


# ---------------------------------------------------------------------------
# similarity histograms (intra-person vs inter-person, cross-modality)


@dataclass
class SimilarityHistograms:
    bin_edges: list
    intra_counts: list
    inter_counts: list
    intra_mean: float
    inter_mean: float

    @property
    def gap(self) -> float:
        return self.intra_mean - self.inter_mean

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["bin_lo", "bin_hi", "intra", "inter"])
        for i in range(len(self.intra_counts)):
            writer.writerow([self.bin_edges[i], self.bin_edges[i + 1],
                             self.intra_counts[i], self.inter_counts[i]])
        return buf.getvalue()


def similarity_histograms(model: al.AlignmentModel, manifest: DatasetManifest,
                          bins: int = 40) -> SimilarityHistograms:
    """Cosine-similarity histograms over all cross-modality test pairs."""
    ir_feats, ir_ids, _ = _test_items(model, manifest, IR)
    rgb_feats, rgb_ids, _ = _test_items(model, manifest, RGB)
    sim = cosine_similarity_matrix(ir_feats, rgb_feats)
    same = ir_ids[:, None] == rgb_ids[None, :]
    edges = np.linspace(-1.0, 1.0, bins + 1)
    intra = sim[same]
    inter = sim[~same]
    intra_counts, _ = np.histogram(intra, bins=edges)
    inter_counts, _ = np.histogram(inter, bins=edges)
    return SimilarityHistograms(edges.tolist(), intra_counts.tolist(), inter_counts.tolist(),
                                float(intra.mean()), float(inter.mean()))


def save_histogram_png(hist: SimilarityHistograms, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    edges = np.asarray(hist.bin_edges)
    centers = (edges[:-1] + edges[1:]) / 2
    width = edges[1] - edges[0]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(centers, np.asarray(hist.intra_counts, dtype=float) / max(sum(hist.intra_counts), 1),
           width=width, alpha=0.6, label="intra-person")
    ax.bar(centers, np.asarray(hist.inter_counts, dtype=float) / max(sum(hist.inter_counts), 1),
           width=width, alpha=0.6, label="inter-person")
    ax.set_xlabel("cross-modality cosine similarity")
    ax.set_ylabel("fraction of pairs")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# generation fidelity against the renderer's ground truth


def color_fidelity(generation: gn.GenerationModel, manifest: DatasetManifest,
                   n_identities: int = 30, seed: int = 0) -> dict:
    """Body-region color error of IR->RGB generations vs the true palette.

    For each sampled training identity one IR image is translated to RGB using
    a same-identity RGB image as the style source. The error is the mean
    absolute difference (in the [-1, 1] pixel scale) between the generated
    image and the identity's true palette colors over the renderer's
    ground-truth body masks. `gray_error` scores the IR image itself
    replicated to three channels, the no-color passthrough baseline.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 4, 0)))
    ids = rng.choice(np.asarray(manifest.train_ids),
                     size=min(n_identities, len(manifest.train_ids)), replace=False)
    generation.eval()
    model_errors, gray_errors = [], []
    index_of = {rec.path: i for i, rec in enumerate(manifest.records)}
    for identity in ids:
        ir_recs = manifest.records_for(modality=IR, identity=int(identity))
        rgb_recs = manifest.records_for(modality=RGB, identity=int(identity))
        ir_rec = ir_recs[int(rng.integers(len(ir_recs)))]
        rgb_rec = rgb_recs[int(rng.integers(len(rgb_recs)))]
        x_ir = torch.from_numpy(manifest.load_pixels(ir_rec))[None]
        x_rgb = torch.from_numpy(manifest.load_pixels(rgb_rec))[None]
        with torch.no_grad():
            content = gn.encode_content(generation, x_ir)
            style = gn.encode_style(generation, x_rgb, RGB)
            x_gen = gn.decode(generation, content, style, RGB)[0].numpy()

        spec, jitter = manifest.record_render_params(index_of[ir_rec.path])
        torso, legs = body_masks(spec, jitter, manifest.image_size)
        gray = x_ir[0].numpy()  # IR already replicated to 3 channels on load
        for mask, color_idx in ((torso, spec.upper_color), (legs, spec.lower_color)):
            if not mask.any():
                continue
            target = np.asarray(manifest.palette.colors[color_idx].rgb) * 2.0 - 1.0
            model_errors.append(np.abs(x_gen[:, mask] - target[:, None]).mean())
            gray_errors.append(np.abs(gray[:, mask] - target[:, None]).mean())
    return {"model_error": float(np.mean(model_errors)),
            "gray_error": float(np.mean(gray_errors))}


def reconstruction_l1(generation: gn.GenerationModel, manifest: DatasetManifest,
                      n_images: int = 32, seed: int = 0) -> float:
    """Own-modality reconstruction L1 on freshly rendered train-identity images."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5, 0)))
    specs = manifest.identity_specs()
    cfg = manifest.config
    generation.eval()
    totals = []
    ids = rng.choice(np.asarray(manifest.train_ids), size=min(n_images, len(manifest.train_ids)),
                     replace=False)
    for identity in ids:
        spec = specs[int(identity)]
        jitter = sample_jitter(rng, cfg.jitter)
        rgb = render_rgb(spec, jitter, rng, manifest.palette, manifest.image_size, cfg.noise_std_rgb)
        ir = render_ir(spec, jitter, rng, manifest.palette, manifest.image_size, cfg.noise_std_ir)
        x_rgb = torch.from_numpy(rgb)[None]
        x_ir = torch.from_numpy(np.repeat(ir, 3, axis=0))[None]
        with torch.no_grad():
            loss = gn.recon_loss(generation, x_rgb, x_ir)
        totals.append(float(loss) / 2.0)  # per-modality mean of the two L1 terms
    return float(np.mean(totals))


# ---------------------------------------------------------------------------
# ablation harness


ABLATION_VARIANTS = (
    {"index": 1, "label": "baseline", "sl": False, "il": False, "note": ""},
    {"index": 2, "label": "set-level", "sl": True, "il": False, "note": ""},
    {"index": 3, "label": "instance-level", "sl": False, "il": True, "note": ""},
    {"index": 4, "label": "set+instance", "sl": True, "il": True, "note": ""},
    {"index": 5, "label": "separate-encoder", "sl": False, "il": True,
     "note": "separate set-level encoder; feature-level adversary omitted"},
)


def _variant_config(base: "TrainConfig", variant: dict, seed: int):
    from .training import TrainConfig

    cfg = TrainConfig.from_dict(base.to_dict())
    cfg.set_level_sharing = variant["sl"]
    cfg.instance_level_alignment = variant["il"]
    cfg.seed = seed
    return cfg


def run_training_eval(config, dataset_dir, repeats: int = 10, eval_seed: int = 100,
                      shot: str = "single", max_rank: int = 20) -> dict:
    """Train one model and evaluate it; the unit of work for sweeps and ablations."""
    from .training import train_full

    torch.set_num_threads(max(1, config.num_threads))
    manifest = DatasetManifest.load(dataset_dir)
    state = train_full(config, manifest)
    report = evaluate_protocol(state.alignment, manifest, shot=shot, repeats=repeats,
                               seed=eval_seed, max_rank=max_rank)
    return {"rank1": report.cmc_mean[0],
            "rank10": report.cmc_mean[min(9, max_rank - 1)],
            "rank20": report.cmc_mean[min(19, max_rank - 1)],
            "mAP": report.map_mean}


def _run_variant_task(payload):
    from .training import TrainConfig

    config = TrainConfig.from_dict(payload["config"])
    metrics = run_training_eval(config, payload["dataset_dir"], repeats=payload["repeats"],
                                eval_seed=payload["eval_seed"])
    return {**payload["meta"], **metrics}


def ablation_suite(base_config, manifest: DatasetManifest, seeds=(0,), repeats: int = 10,
                   eval_seed: int = 100, n_workers: int = 1) -> list:
    """Train and evaluate the five alignment variants; one result row per variant.

    Rows carry the per-seed metrics and their means. Variant 5 approximates
    the GAN-aligned separate encoder by the separate-encoder toggle alone.
    """
    tasks = []
    for variant in ABLATION_VARIANTS:
        for seed in seeds:
            cfg = _variant_config(base_config, variant, seed)
            tasks.append({"config": cfg.to_dict(), "dataset_dir": str(manifest.root),
                          "repeats": repeats, "eval_seed": eval_seed,
                          "meta": {"index": variant["index"], "label": variant["label"],
                                   "sl": variant["sl"], "il": variant["il"],
                                   "note": variant["note"], "seed": seed}})
    results = run_tasks(_run_variant_task, tasks, n_workers)

    rows = []
    for variant in ABLATION_VARIANTS:
        runs = [r for r in results if r["index"] == variant["index"]]
        runs.sort(key=lambda r: r["seed"])
        row = dict(variant)
        row["seeds"] = [r["seed"] for r in runs]
        for key in ("rank1", "rank10", "rank20", "mAP"):
            row[f"{key}_per_seed"] = [r[key] for r in runs]
            row[key] = float(np.mean([r[key] for r in runs]))
        rows.append(row)
    return rows


def run_tasks(fn, payloads, n_workers: int = 1):
    """Run payloads through fn, optionally in spawned worker processes."""
    if n_workers <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    import multiprocessing as mp

    ctx = mp.get_context("spawn")
    with ProcessPoolExecutor(max_workers=n_workers, mp_context=ctx) as pool:
        return list(pool.map(fn, payloads))


def ablation_csv(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["index", "label", "SL", "IL", "rank1", "rank10", "rank20", "mAP", "seeds", "note"])
    for row in rows:
        writer.writerow([row["index"], row["label"], int(row["sl"]), int(row["il"]),
                         f"{row['rank1']:.4f}", f"{row['rank10']:.4f}", f"{row['rank20']:.4f}",
                         f"{row['mAP']:.4f}", ";".join(str(s) for s in row["seeds"]), row["note"]])
    return buf.getvalue()
