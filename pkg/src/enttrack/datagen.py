"""Synthetic cross-modal entity-tracking datasets.

Each datapoint shows six entities (three per category, every entity always
the very same image vector) over twelve exposures: an entity appears exactly
twice, each time with one attribute from its assigned two-attribute set.  The
three sampled attributes yield the three possible sets, assigned bijectively
to the entities of each category, so the design is completely balanced: two
entities per attribute per category, one entity per attribute pair per
category.  The query names a category plus two attributes and matches exactly
one entity by construction; the model must pick that entity's image among the
six candidates.

Category identity is never carried in an exposure, only in the (hidden)
labels used for validation and error analysis.  Generation is a pure function
of (world, seed): per-datapoint RNG streams are derived by counter-based
splitting, so splits are disjoint and order-independent.

Embeddings are synthetic stand-ins: image vectors cluster around a category
prototype with per-entity noise (categorization learnable, individuation
required), attribute and noun vectors are unit Gaussians in their own spaces.
Precomputed vectors can be ingested from whitespace-separated text files
instead.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ATTRIBUTE_SETS = ((0, 1), (0, 2), (1, 2))  # the three 2-subsets of 3 attributes

EXPOSURES_PER_DATAPOINT = 12
CANDIDATES_PER_DATAPOINT = 6


@dataclass
class Exposure:
    """One time step: an image vector paired with one attribute vector.

    entity_id / attribute_name are hidden labels for validation and error
    analysis; models never see them.
    """

    image: np.ndarray
    attribute: np.ndarray
    entity_id: str | None = None
    attribute_name: str | None = None


@dataclass
class DebugInfo:
    """Hidden labels of a datapoint (written to disk only with --debug)."""

    categories: list[str]
    attribute_names: list[str]
    query_category: str
    query_attributes: list[str]
    exposure_entities: list[str]
    exposure_attributes: list[str]
    candidate_entities: list[str]
    candidate_categories: list[str]
    target_entity: str


@dataclass
class Datapoint:
    exposures: list[Exposure]
    query_noun: np.ndarray
    query_attrs: tuple[np.ndarray, np.ndarray]
    candidates: list[np.ndarray]
    gold: int
    debug: DebugInfo | None = None


@dataclass
class EmbeddingWorld:
    """Fixed inventory of category, attribute, and entity vectors."""

    v: int
    t: int
    t_c: int
    noise: float
    seed: int
    category_names: list[str]
    attribute_names: list[str]
    prototypes: dict[str, np.ndarray]
    nouns: dict[str, np.ndarray]
    attributes: dict[str, np.ndarray]
    entities: dict[tuple[str, int], np.ndarray]
    entities_per_category: int = 0


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def _unit(x: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(x)
    if n == 0:
        raise ValueError("cannot normalize a zero vector")
    return x / n


def make_world(v: int = 64, t: int = 32, t_c: int = 32, n_categories: int = 16,
               entities_per_category: int = 8, n_attributes: int = 8,
               noise: float = 0.3, seed: int = 0) -> EmbeddingWorld:
    """Draw a deterministic synthetic world.

    Prototypes and attribute/noun vectors are unit Gaussians, L2-normalized;
    an entity image is normalize(prototype + noise * gaussian), so entities
    of one category stay close to the prototype but remain distinguishable
    for noise > 0.
    """
    if n_categories < 2:
        raise ValueError(f"need at least 2 categories, got {n_categories}")
    if entities_per_category < 3:
        raise ValueError(f"need at least 3 entities per category, got {entities_per_category}")
    if n_attributes < 3:
        raise ValueError(f"need at least 3 attributes, got {n_attributes}")
    if noise < 0:
        raise ValueError(f"noise must be non-negative, got {noise}")

    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    category_names = [f"cat{i:03d}" for i in range(n_categories)]
    attribute_names = [f"attr{i:03d}" for i in range(n_attributes)]

    prototypes = {c: _unit(rng.standard_normal(v)) for c in category_names}
    nouns = {c: _unit(rng.standard_normal(t_c)) for c in category_names}
    attributes = {a: _unit(rng.standard_normal(t)) for a in attribute_names}
    entities = {}
    for c in category_names:
        for k in range(entities_per_category):
            entities[(c, k)] = _unit(prototypes[c] + noise * rng.standard_normal(v))

    return EmbeddingWorld(v=v, t=t, t_c=t_c, noise=noise, seed=seed,
                          category_names=category_names, attribute_names=attribute_names,
                          prototypes=prototypes, nouns=nouns, attributes=attributes,
                          entities=entities, entities_per_category=entities_per_category)


def world_from_vector_files(images_path, attributes_path, nouns_path) -> EmbeddingWorld:
    """Build a world from precomputed vectors.

    Image vector names must be "category:index"; the nouns file must name
    every category appearing in the images file.
    """
    images = load_vectors(images_path)
    attrs = load_vectors(attributes_path)
    nouns = load_vectors(nouns_path)

    entities: dict[tuple[str, int], np.ndarray] = {}
    per_cat: dict[str, int] = {}
    for name, vec in images.items():
        if ":" not in name:
            raise ValueError(f"image vector name {name!r} is not of the form category:index")
        cat, idx = name.rsplit(":", 1)
        entities[(cat, int(idx))] = vec
        per_cat[cat] = per_cat.get(cat, 0) + 1

    categories = sorted(per_cat)
    if len(categories) < 2:
        raise ValueError("need image vectors for at least 2 categories")
    if min(per_cat.values()) < 3:
        raise ValueError("every category needs at least 3 entity images")
    if len(attrs) < 3:
        raise ValueError("need at least 3 attribute vectors")
    missing = [c for c in categories if c not in nouns]
    if missing:
        raise ValueError(f"nouns file is missing categories: {missing}")

    some_img = next(iter(entities.values()))
    protos = {c: _unit(np.mean([v for (cc, _), v in entities.items() if cc == c], axis=0))
              for c in categories}
    return EmbeddingWorld(v=some_img.shape[0], t=next(iter(attrs.values())).shape[0],
                          t_c=next(iter(nouns.values())).shape[0], noise=0.0, seed=0,
                          category_names=categories, attribute_names=sorted(attrs),
                          prototypes=protos, nouns={c: nouns[c] for c in categories},
                          attributes=attrs, entities=entities,
                          entities_per_category=min(per_cat.values()))


def generate_datapoint(world: EmbeddingWorld, rng: np.random.Generator) -> Datapoint:
    """Sample one balanced twelve-exposure sequence with a unique-match query."""
    if len(world.category_names) < 2:
        raise ValueError("world has fewer than 2 categories")
    if world.entities_per_category < 3:
        raise ValueError("world has fewer than 3 entities per category")
    if len(world.attribute_names) < 3:
        raise ValueError("world has fewer than 3 attributes")

    cats = [world.category_names[i] for i in rng.choice(len(world.category_names), size=2, replace=False)]
    attrs = [world.attribute_names[i] for i in rng.choice(len(world.attribute_names), size=3, replace=False)]

    # one entity per (category, attribute set); the set assignment is a random
    # bijection within each category, which is what makes the design balanced
    entity_ids: list[tuple[str, int]] = []
    entity_sets: dict[tuple[str, int], tuple[int, int]] = {}
    for cat in cats:
        picks = rng.choice(world.entities_per_category, size=3, replace=False)
        assignment = rng.permutation(3)
        for j, ent_idx in enumerate(picks):
            eid = (cat, int(ent_idx))
            entity_ids.append(eid)
            entity_sets[eid] = ATTRIBUTE_SETS[assignment[j]]

    exposures = []
    for eid in entity_ids:
        for attr_idx in entity_sets[eid]:
            name = attrs[attr_idx]
            exposures.append(Exposure(image=world.entities[eid],
                                      attribute=world.attributes[name],
                                      entity_id=f"{eid[0]}:{eid[1]}",
                                      attribute_name=name))
    order = rng.permutation(len(exposures))
    exposures = [exposures[i] for i in order]

    q_cat = cats[int(rng.integers(2))]
    q_set = ATTRIBUTE_SETS[int(rng.integers(3))]
    target = next(eid for eid in entity_ids if eid[0] == q_cat and entity_sets[eid] == q_set)

    cand_order = rng.permutation(len(entity_ids))
    cand_ids = [entity_ids[i] for i in cand_order]
    gold = cand_ids.index(target)

    debug = DebugInfo(
        categories=cats,
        attribute_names=attrs,
        query_category=q_cat,
        query_attributes=[attrs[q_set[0]], attrs[q_set[1]]],
        exposure_entities=[e.entity_id for e in exposures],
        exposure_attributes=[e.attribute_name for e in exposures],
        candidate_entities=[f"{c}:{k}" for c, k in cand_ids],
        candidate_categories=[c for c, _ in cand_ids],
        target_entity=f"{target[0]}:{target[1]}",
    )
    return Datapoint(
        exposures=exposures,
        query_noun=world.nouns[q_cat],
        query_attrs=(world.attributes[attrs[q_set[0]]], world.attributes[attrs[q_set[1]]]),
        candidates=[world.entities[eid] for eid in cand_ids],
        gold=gold,
        debug=debug,
    )


def validate_datapoint(dp: Datapoint) -> ValidationReport:
    """Check every construction guarantee; diagnostics, not exceptions.

    An empty violations list means valid.  Label-dependent checks need the
    hidden labels (generated datapoints always carry them; datapoints loaded
    from files need the debug block) and are reported as skipped otherwise.
    """
    rep = ValidationReport()
    bad = rep.violations.append

    if len(dp.exposures) != EXPOSURES_PER_DATAPOINT:
        bad(f"expected {EXPOSURES_PER_DATAPOINT} exposures, found {len(dp.exposures)}")
    if len(dp.candidates) != CANDIDATES_PER_DATAPOINT:
        bad(f"expected {CANDIDATES_PER_DATAPOINT} candidates, found {len(dp.candidates)}")
    if not 0 <= dp.gold < len(dp.candidates):
        bad(f"gold index {dp.gold} outside candidate range 0..{len(dp.candidates) - 1}")
    if len(dp.query_attrs) != 2:
        bad(f"expected 2 query attributes, found {len(dp.query_attrs)}")

    labeled = (dp.debug is not None
               and all(e.entity_id is not None and e.attribute_name is not None for e in dp.exposures))
    if not labeled:
        rep.skipped.extend([
            "entity multiplicities (labels absent)",
            "attribute balance (labels absent)",
            "unique-match property (labels absent)",
            "gold correctness (labels absent)",
        ])
        return rep
    dbg = dp.debug

    # per-entity structure: 6 entities, each seen twice with two distinct
    # attributes and a single consistent image
    ent_attrs: dict[str, list[str]] = {}
    ent_imgs: dict[str, np.ndarray] = {}
    for e in dp.exposures:
        ent_attrs.setdefault(e.entity_id, []).append(e.attribute_name)
        prev = ent_imgs.setdefault(e.entity_id, e.image)
        if not np.array_equal(prev, e.image):
            bad(f"entity {e.entity_id} shown with more than one image")
    if len(ent_attrs) != 6:
        bad(f"expected 6 distinct entities, found {len(ent_attrs)}")
    for eid, names in ent_attrs.items():
        if len(names) != 2:
            bad(f"entity {eid} has {len(names)} exposures, expected 2")
        elif names[0] == names[1]:
            bad(f"entity {eid} shown twice with the same attribute {names[0]}")

    cat_of = lambda eid: eid.rsplit(":", 1)[0]
    cats = sorted({cat_of(eid) for eid in ent_attrs})
    if len(cats) != 2:
        bad(f"expected 2 categories, found {len(cats)}")
    for c in cats:
        n = sum(1 for eid in ent_attrs if cat_of(eid) == c)
        if n != 3:
            bad(f"category {c} has {n} entities, expected 3")

    # balanced design: within each category every attribute pairs with
    # exactly 2 entities and every attribute pair with exactly 1 (so each
    # query attribute is carried by 3 entities besides the target, and the
    # query pair by 2 entities overall, one per category)
    attr_pool = sorted({e.attribute_name for e in dp.exposures})
    if len(attr_pool) != 3:
        bad(f"expected 3 distinct attributes across exposures, found {len(attr_pool)}")
    else:
        for c in cats:
            for a in attr_pool:
                n = sum(1 for eid, names in ent_attrs.items() if cat_of(eid) == c and a in names)
                if n != 2:
                    bad(f"attribute {a} pairs with {n} entities in category {c}, expected 2")
            pairs = sorted(tuple(sorted(names)) for eid, names in ent_attrs.items() if cat_of(eid) == c)
            if len(set(pairs)) != 3:
                bad(f"category {c} reuses an attribute pair: {pairs}")

    # unique match and gold correctness, by brute force over the 6 entities
    qa = set(dbg.query_attributes)
    if len(qa) != 2:
        bad(f"query attributes are not distinct: {dbg.query_attributes}")
    matches = [eid for eid, names in ent_attrs.items()
               if cat_of(eid) == dbg.query_category and qa <= set(names)]
    if len(matches) != 1:
        bad(f"query matches {len(matches)} entities, expected exactly 1 (got {matches})")
    elif dbg.candidate_entities[dp.gold] != matches[0]:
        bad(f"gold candidate {dbg.candidate_entities[dp.gold]} is not the unique match {matches[0]}")

    if sorted(dbg.candidate_entities) != sorted(ent_attrs):
        bad("candidate set is not exactly the 6 exposed entities")

    # confounder guarantee
    same_cat_partial = [eid for eid, names in ent_attrs.items()
                        if cat_of(eid) == dbg.query_category and len(qa & set(names)) == 1]
    other_cat_full = [eid for eid, names in ent_attrs.items()
                      if cat_of(eid) != dbg.query_category and qa <= set(names)]
    if not same_cat_partial:
        bad("no same-category confounder sharing exactly one query attribute")
    if not other_cat_full:
        bad("no other-category confounder carrying both query attributes")

    return rep


def generate_dataset(world: EmbeddingWorld, sizes: tuple[int, int, int], seed: int):
    """Generate (train, val, test) datapoint lists from disjoint RNG streams."""
    if any(n < 1 for n in sizes):
        raise ValueError(f"split sizes must be >= 1, got {sizes}")
    splits = []
    for split_idx, n in enumerate(sizes):
        dps = []
        for i in range(n):
            rng = np.random.default_rng(np.random.SeedSequence([seed, split_idx, i]))
            dps.append(generate_datapoint(world, rng))
        splits.append(dps)
    return tuple(splits)


def load_vectors(path) -> dict[str, np.ndarray]:
    """Parse a whitespace-separated vector file: one "name v1 v2 ..." per line."""
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.split()
            if not parts:
                continue
            name, values = parts[0], parts[1:]
            if name in vectors:
                raise ValueError(f"{path}:{lineno}: duplicate vector name {name!r}")
            try:
                vec = np.array([float(x) for x in values], dtype=np.float64)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise ValueError(f"{path}:{lineno}: vector has dim {vec.shape[0]}, expected {dim}")
            vectors[name] = vec
    return vectors


# ---------------------------------------------------------------------------
# JSON Lines serialization


def datapoint_to_json(dp: Datapoint, debug: bool = False) -> dict:
    rec = {
        "exposures": [{"image": e.image.tolist(), "attribute": e.attribute.tolist()}
                      for e in dp.exposures],
        "query": {"noun": dp.query_noun.tolist(),
                  "attrs": [dp.query_attrs[0].tolist(), dp.query_attrs[1].tolist()]},
        "candidates": [c.tolist() for c in dp.candidates],
        "gold": dp.gold,
    }
    if debug and dp.debug is not None:
        rec["debug"] = vars(dp.debug)
    return rec


def datapoint_from_json(rec: dict) -> Datapoint:
    dbg = DebugInfo(**rec["debug"]) if "debug" in rec else None
    exposures = []
    for i, e in enumerate(rec["exposures"]):
        exposures.append(Exposure(
            image=np.asarray(e["image"], dtype=np.float64),
            attribute=np.asarray(e["attribute"], dtype=np.float64),
            entity_id=dbg.exposure_entities[i] if dbg else None,
            attribute_name=dbg.exposure_attributes[i] if dbg else None,
        ))
    return Datapoint(
        exposures=exposures,
        query_noun=np.asarray(rec["query"]["noun"], dtype=np.float64),
        query_attrs=(np.asarray(rec["query"]["attrs"][0], dtype=np.float64),
                     np.asarray(rec["query"]["attrs"][1], dtype=np.float64)),
        candidates=[np.asarray(c, dtype=np.float64) for c in rec["candidates"]],
        gold=int(rec["gold"]),
        debug=dbg,
    )


def write_split(path, datapoints, debug: bool = False):
    with open(path, "w") as f:
        for dp in datapoints:
            f.write(json.dumps(datapoint_to_json(dp, debug=debug)))
            f.write("\n")


def read_split(path) -> list[Datapoint]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                out.append(datapoint_from_json(json.loads(line)))
    return out


def datapoint_dims(dp: Datapoint) -> tuple[int, int, int]:
    """(image dim v, attribute dim t, noun dim t_c) of a datapoint."""
    return (dp.candidates[0].shape[0],
            dp.exposures[0].attribute.shape[0],
            dp.query_noun.shape[0])


def write_dataset_dir(out_dir, world: EmbeddingWorld, splits, seed: int, debug: bool):
    """Write train/val/test JSONL files plus a meta.json describing the run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = ("train", "val", "test")
    for name, dps in zip(names, splits):
        write_split(out / f"{name}.jsonl", dps, debug=debug)
    meta = {
        "sizes": {n: len(d) for n, d in zip(names, splits)},
        "dims": {"v": world.v, "t": world.t, "t_c": world.t_c},
        "world": {"categories": len(world.category_names),
                  "entities_per_category": world.entities_per_category,
                  "attributes": len(world.attribute_names),
                  "noise": world.noise, "seed": world.seed},
        "seed": seed,
        "debug": debug,
    }
    with open(out / "meta.json", "w") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
    return meta
