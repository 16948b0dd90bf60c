#!/usr/bin/env python3
"""Capture service responses (and the matching CLI outputs) as UI fixtures.

Builds a small deterministic dataset, runs the inspection service in-process,
and records, for 3 test images x 3 thresholds, the /v1/localize payload next
to the boxes the CLI writes for identical parameters, plus one top-5
representer query per image.  The frontend agreement tests replay these
payloads through the view-model layer and require exact equality.

Run from the repository root:  python3 scripts/make_ui_fixtures.py
"""

from __future__ import annotations

import json
import subprocess
import sys
import tempfile
from pathlib import Path

from fastapi.testclient import TestClient

from reprloc import fit
from reprloc.service import ServiceState, create_app
from reprloc.synth import SynthSpec, generate_synthetic

REPO_ROOT = Path(__file__).resolve().parent.parent
FIXTURE_PATH = REPO_ROOT / "frontend" / "fixtures" / "agreement.json"

THETAS = (0.25, 0.5, 0.75)
IMAGE_COUNT = 3
TOP_K = 5


def main() -> int:
    with tempfile.TemporaryDirectory() as tmp:
        tmp_path = Path(tmp)
        dataset = generate_synthetic(
            SynthSpec(image_count=10, test_count=IMAGE_COUNT, seed=99), tmp_path / "ds"
        )
        predictors = fit(dataset)
        state = ServiceState.build(dataset, predictors)
        client = TestClient(create_app(state))

        predictor_path = tmp_path / "predictor.json"
        subprocess.run(
            [sys.executable, "-m", "reprloc.cli", "fit",
             "--manifest", str(dataset.source_path), "--out", str(predictor_path)],
            check=True, capture_output=True,
        )

        test_ids = [e.image_id for e in dataset.split_entries("test")]
        cases = []
        for image_id in test_ids:
            for theta in THETAS:
                infer_dir = tmp_path / f"infer_{image_id}_{theta}"
                subprocess.run(
                    [sys.executable, "-m", "reprloc.cli", "infer",
                     "--manifest", str(dataset.source_path),
                     "--predictor", str(predictor_path),
                     "--threshold", str(theta), "--out", str(infer_dir)],
                    check=True, capture_output=True,
                )
                cli_doc = json.loads(
                    (infer_dir / f"{image_id}.boxes.json").read_text()
                )
                service_doc = client.get(
                    f"/v1/localize/{image_id}", params={"theta": theta}
                ).json()
                cases.append(
                    {"image_id": image_id, "theta": theta,
                     "service": service_doc, "cli": cli_doc}
                )

        representer_cases = []
        for image_id in test_ids:
            doc = client.get(
                f"/v1/representer/{image_id}",
                params={"row": 4, "col": 4, "k": TOP_K, "polarity": "both"},
            ).json()
            representer_cases.append({"image_id": image_id, "service": doc})

        images_doc = client.get("/v1/images").json()

    FIXTURE_PATH.parent.mkdir(parents=True, exist_ok=True)
    FIXTURE_PATH.write_text(
        json.dumps(
            {
                "thetas": list(THETAS),
                "k": TOP_K,
                "localize_cases": cases,
                "representer_cases": representer_cases,
                "images": images_doc,
            },
            indent=2,
        )
        + "\n"
    )
    print(f"wrote {FIXTURE_PATH} ({len(cases)} localize cases)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
