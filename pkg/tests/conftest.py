import json
import re
import sys

import numpy as np
import pytest

from refexp.data import write_features


def make_doc(scenes, refs=(), categories=None):
    """``scenes``: list of (scene_id, W, H, [(region_id, cat, [x, y, w, h]), ...])."""
    doc = {"images": [], "annotations": [], "refs": []}
    if categories is not None:
        doc["categories"] = [{"id": c, "name": n} for c, n in categories.items()]
    for sid, w, h, regs in scenes:
        doc["images"].append({"id": sid, "width": w, "height": h})
        for rid, cat, box in regs:
            doc["annotations"].append({"id": rid, "image_id": sid, "category_id": cat, "bbox": box})
    for eid, rid, raw in refs:
        doc["refs"].append({"id": eid, "ann_id": rid, "raw": raw})
    return doc


@pytest.fixture
def write_dataset(tmp_path):
    def _write(doc, features, dim=None, stem="ds"):
        ann = tmp_path / f"{stem}.json"
        feat = tmp_path / f"{stem}.rfea"
        ann.write_text(json.dumps(doc), encoding="utf-8")
        write_features(feat, features, dim)
        return ann, feat
    return _write


@pytest.fixture
def small_doc():
    doc = make_doc(
        [(1, 100, 80, [(10, 1, [0, 0, 20, 20]), (11, 2, [50, 40, 30, 30])])],
        [(100, 10, "the left man"), (101, 10, "Man, left!"), (102, 11, "a red ball")],
        {1: "person", 2: "ball"},
    )
    feats = {10: np.array([1.0, 0.0, 0.5]), 11: np.array([0.0, 1.0, 0.25])}
    return doc, feats


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    lines = dict(mod.RESULTS)
    for key in ("failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m and int(m.group(1)) not in lines:
                msg = str(rep.longrepr).strip().splitlines()[-1] if rep.longrepr else "no detail"
                lines[int(m.group(1))] = f"FAIL criterion {m.group(1)}: test did not complete ({msg})"
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
