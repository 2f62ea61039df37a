"""Retrieval metrics, descriptor extraction and inspection exports."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .correspondence import co_attention, cosine_similarity, export_matches, matching_probability
from .data import Dataset, write_pgm
from .tensor_field import DEFAULT_GEM_P, gem_pool, minmax_normalize, person_mask

CMC_RANKS = 10


@dataclass
class RetrievalResult:
    mAP: float
    cmc: List[float]
    ap: List[float] = field(default_factory=list)
    excluded_queries: int = 0

    def to_json(self) -> Dict:
        return {"mAP": self.mAP, "cmc": self.cmc, "excluded_queries": self.excluded_queries}


def average_precision(ranked_matches: np.ndarray) -> float:
    """Mean of the precision at the rank of every positive (boolean ranked list)."""
    hits = np.flatnonzero(ranked_matches)
    if hits.size == 0:
        return float("nan")
    return float(np.mean((np.arange(hits.size) + 1) / (hits + 1)))


def cosine_scores(query: np.ndarray, gallery: np.ndarray) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    q = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
    g = g / np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-12)
    return q @ g.T


def evaluate_retrieval(query_desc, query_labels, gallery_desc, gallery_labels,
                       ranks: int = CMC_RANKS) -> RetrievalResult:
    """Rank the gallery by cosine similarity for every query.

    Ties keep gallery order. Queries without any gallery positive are skipped
    and counted in ``excluded_queries``.
    """
    gallery_labels = np.asarray(gallery_labels)
    query_labels = np.asarray(query_labels)
    if len(gallery_labels) == 0:
        raise ValueError("gallery is empty")
    scores = cosine_scores(query_desc, gallery_desc)
    aps, first_hits, excluded = [], [], 0
    for i, label in enumerate(query_labels):
        order = np.argsort(-scores[i], kind="stable")
        matches = gallery_labels[order] == label
        if not matches.any():
            excluded += 1
            continue
        aps.append(average_precision(matches))
        first_hits.append(int(np.argmax(matches)))
    if not aps:
        return RetrievalResult(0.0, [0.0] * ranks, [], excluded)
    first = np.array(first_hits)
    cmc = [float(np.mean(first < k)) for k in range(1, ranks + 1)]
    return RetrievalResult(float(np.mean(aps)), cmc, aps, excluded)


def extract_descriptors(extractor, dataset: Dataset, modality: str, gem_p: float = DEFAULT_GEM_P,
                        batch_size: int = 128) -> Tuple[List[str], np.ndarray]:
    """GeM-pooled layer-5 descriptors for every image of ``modality``, in manifest order."""
    entries = dataset.select(modality)
    out = []
    for start in range(0, len(entries), batch_size):
        chunk = entries[start:start + batch_size]
        feats = extractor.forward(dataset.stack(chunk), modality)
        out.append(gem_pool(feats[5], gem_p))
    desc = np.concatenate(out) if out else np.zeros((0, extractor.shape.c_layer5), dtype=np.float32)
    return [e.identity for e in entries], desc


def single_shot(query_ids, query_desc, gallery_ids, gallery_desc, trials: int = 10,
                seed: int = 0) -> RetrievalResult:
    """Average over ``trials`` random galleries holding one image per identity."""
    rng = np.random.default_rng(seed)
    gallery_ids = np.asarray(gallery_ids)
    query_ids = np.asarray(query_ids)
    idents = sorted(set(gallery_ids.tolist()))
    results = []
    for _ in range(trials):
        pick = [int(rng.choice(np.flatnonzero(gallery_ids == ident))) for ident in idents]
        results.append(evaluate_retrieval(query_desc, query_ids, gallery_desc[pick], gallery_ids[pick]))
    return RetrievalResult(
        mAP=float(np.mean([r.mAP for r in results])),
        cmc=[float(v) for v in np.mean([r.cmc for r in results], axis=0)],
        ap=[float(v) for v in np.mean([r.ap for r in results], axis=0)] if results[0].ap else [],
        excluded_queries=results[0].excluded_queries,
    )


def cross_modal_eval(extractor, dataset: Dataset, query_modality: str = "B", trials: int = 10,
                     seed: int = 0, gem_p: float = DEFAULT_GEM_P) -> RetrievalResult:
    gallery_modality = "A" if query_modality == "B" else "B"
    q_ids, q = extract_descriptors(extractor, dataset, query_modality, gem_p)
    g_ids, g = extract_descriptors(extractor, dataset, gallery_modality, gem_p)
    return single_shot(q_ids, q, g_ids, g, trials, seed)


def to_gray(spatial_map: np.ndarray) -> np.ndarray:
    """Scale a map to [0, 1] for display (constant maps are only clamped)."""
    return np.asarray(minmax_normalize(np.asarray(spatial_map, dtype=np.float64)))


def export_artifacts(extractor, image_a: np.ndarray, image_b: np.ndarray, out_dir, k: int = 20,
                     beta: float = 50.0, layer: int = 5) -> Dict[str, str]:
    """Masks, co-attention maps and the top-k match CSV for one A/B image pair."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fa = extractor.forward(np.asarray(image_a)[None], "A")[layer][0].astype(np.float64)
    fb = extractor.forward(np.asarray(image_b)[None], "B")[layer][0].astype(np.float64)
    mask_a, mask_b = person_mask(fa), person_mask(fb)
    P_ab = matching_probability(cosine_similarity(fa, fb), beta)
    P_ba = matching_probability(cosine_similarity(fb, fa), beta)
    att_a = co_attention(mask_a, mask_b, P_ab)
    att_b = co_attention(mask_b, mask_a, P_ba)
    files = {
        "mask_a": out_dir / "mask_a.pgm",
        "mask_b": out_dir / "mask_b.pgm",
        "coattention_a": out_dir / "coattention_a.pgm",
        "coattention_b": out_dir / "coattention_b.pgm",
        "matches": out_dir / "matches.csv",
    }
    for key, m in (("mask_a", mask_a), ("mask_b", mask_b), ("coattention_a", att_a), ("coattention_b", att_b)):
        try:
            write_pgm(files[key], to_gray(m))
        except OSError as exc:
            raise OSError(f"{files[key]}: {exc.strerror}") from exc
    export_matches(files["matches"], P_ab, k)
    return {key: str(p) for key, p in files.items()}


def random_ranking_map(query_labels: Sequence, gallery_labels: Sequence, trials: int = 200,
                       seed: int = 0) -> float:
    """Expected mAP of a random gallery ordering, by Monte Carlo."""
    rng = np.random.default_rng(seed)
    gallery_labels = np.asarray(gallery_labels)
    vals = []
    for _ in range(trials):
        for label in query_labels:
            matches = gallery_labels[rng.permutation(len(gallery_labels))] == label
            if matches.any():
                vals.append(average_precision(matches))
    return float(np.mean(vals))
