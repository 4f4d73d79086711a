"""Bundled fixtures: generation, hashing and verification.

Every fixture has a provenance tag. ``derived`` fixtures are regenerated from
their oracle and compared byte for byte; all fixtures are checked against the
sha256 recorded in ``MANIFEST.json``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corruption import IMPLEMENTED, CorruptionSpec, corrupt, read_ppm, write_ppm
from .graph import RelationEdge, save_relation_edges
from .hierarchy import EmbeddingTable, Hierarchy
from .inference import build_transition

FIXTURE_DIR = Path(__file__).parent / "fixtures"
GOLDEN_SEVERITY = 3
GOLDEN_SEED = 1234

# R example from the build_transition documentation, plus a 3-class case
R_FIXTURE = {"labels": ["a", "b", "c"], "matrix": [[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.2, 0.3, 0.5]]}


def ramp_image() -> np.ndarray:
    """8x8 RGB ramp: red grows along x, green along y, blue falls along the diagonal."""
    y, x = np.mgrid[0:8, 0:8]
    return np.stack([32 * x + 16, 32 * y + 16, (255 - (32 * x + 32 * y + 32) // 2) % 256], -1).astype(np.uint8)


def _json_bytes(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=1) + "\n").encode()


def _transition_doc(r: dict) -> dict:
    return {"labels": r["labels"], "matrix": build_transition(np.array(r["matrix"])).tolist(),
            "row_stochastic": True}


def derived_bytes(name: str, root: Path) -> bytes | None:
    """Regenerate a derived fixture from its oracle, or None if it is not derived."""
    if name == "transition_T.json":
        return _json_bytes(_transition_doc(json.loads((root / "confusion_R.json").read_text())))
    if name.startswith("golden/") and name.endswith(".ppm"):
        ctype = name.split("/")[1].split("-")[0]
        img = read_ppm(root / "test_8x8.ppm")
        out = corrupt(img, CorruptionSpec(ctype, GOLDEN_SEVERITY, GOLDEN_SEED))
        return f"P6\n{out.shape[1]} {out.shape[0]}\n255\n".encode() + out.tobytes()
    return None


def generate_fixtures(root=FIXTURE_DIR) -> dict:
    root = Path(root)
    (root / "golden").mkdir(parents=True, exist_ok=True)
    prov = {}
    write_ppm(root / "test_8x8.ppm", ramp_image())
    prov["test_8x8.ppm"] = ("trivial", "closed-form color ramp, see fixtures.ramp_image")
    (root / "confusion_R.json").write_bytes(_json_bytes(R_FIXTURE))
    prov["confusion_R.json"] = ("trivial", "hand-written confusion matrix")
    (root / "transition_T.json").write_bytes(derived_bytes("transition_T.json", root))
    prov["transition_T.json"] = ("derived", "build_transition(confusion_R)")
    for t in IMPLEMENTED:
        name = f"golden/{t}-s{GOLDEN_SEVERITY}.ppm"
        (root / name).write_bytes(derived_bytes(name, root))
        prov[name] = ("derived", f"corrupt(test_8x8, {t}, severity {GOLDEN_SEVERITY}, seed {GOLDEN_SEED})")

    names = ["dog", "cat", "car", "bus", "on", "near", "has", "in"]
    vecs = np.array([[1, 0.1, 0, 0], [0.9, 0.2, 0, 0], [0, 0, 1, 0.1], [0, 0.1, 0.9, 0.2],
                     [0.5, 0.5, 0, 0], [0.4, 0.6, 0, 0], [0, 0, 0.5, 0.5], [0, 0, 0.6, 0.4]])
    EmbeddingTable(names, vecs).save(root / "tiny_embeddings.txt")
    prov["tiny_embeddings.txt"] = ("trivial", "hand-written 4-d vectors")
    Hierarchy("entity", [0, 0, 1, 1], [0, 0], names[:4]).save(root / "tiny_ent_hierarchy.json")
    Hierarchy("predicate", [0, 0, 1, 1], [0, 1], names[4:]).save(root / "tiny_pred_hierarchy.json")
    prov["tiny_ent_hierarchy.json"] = ("trivial", "animals vs vehicles, one level-1 group")
    prov["tiny_pred_hierarchy.json"] = ("trivial", "spatial vs possessive, level 2 equals level 1")
    save_relation_edges([RelationEdge("CE", 0, "CP", 2, "has"), RelationEdge("CP", 0, "CE", 2, "on"),
                         RelationEdge("CE", 0, "CE", 1, "similar")], root / "tiny_relations.json")
    prov["tiny_relations.json"] = ("trivial", "three curated edges")

    entries = []
    for name in sorted(prov):
        kind, note = prov[name]
        entries.append({"name": name, "sha256": hashlib.sha256((root / name).read_bytes()).hexdigest(),
                        "provenance": kind, "note": note})
    (root / "MANIFEST.json").write_bytes(_json_bytes({"fixtures": entries}))
    return {e["name"]: e for e in entries}


@dataclass
class FixtureReport:
    checked: list = field(default_factory=list)
    hash_mismatch: list = field(default_factory=list)
    regen_mismatch: list = field(default_factory=list)
    missing: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.hash_mismatch or self.regen_mismatch or self.missing)

    def offending(self) -> list[str]:
        return sorted(set(self.hash_mismatch + self.regen_mismatch + self.missing))


def verify_fixtures(root=FIXTURE_DIR) -> FixtureReport:
    root = Path(root)
    rep = FixtureReport()
    doc = json.loads((root / "MANIFEST.json").read_text())
    for e in doc["fixtures"]:
        path = root / e["name"]
        if not path.exists():
            rep.missing.append(e["name"])
            continue
        data = path.read_bytes()
        rep.checked.append(e["name"])
        if hashlib.sha256(data).hexdigest() != e["sha256"]:
            rep.hash_mismatch.append(e["name"])
        if e["provenance"] == "derived":
            try:
                regen = derived_bytes(e["name"], root)
            except (OSError, ValueError):
                regen = None
            if regen != data:
                rep.regen_mismatch.append(e["name"])
    return rep
