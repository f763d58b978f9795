#!/usr/bin/env python3
"""
Manual test script for the study tools
"""
import json
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent / "src"))

from study_manager import StudyManager  # noqa: E402


def test_manually():
    work = Path(tempfile.mkdtemp(prefix="hdan-"))

    print(f"Initializing study manager in {work}...")
    manager = StudyManager(str(work))

    print("\n=== Phantoms ===")
    phantoms = manager.generate_phantoms("phantoms", count=2, size=32, delta=0.1, sigma=0.05)
    print(json.dumps(phantoms, indent=2))

    print("\n=== Segmentation Summary ===")
    summary = manager.summarize_segmentation("phantoms/phantom-000_label.meta")
    print(json.dumps(summary, indent=2))

    print("\n=== Self Evaluation ===")
    evaluation = manager.evaluate_segmentations("phantoms", "phantoms", report_path="report.csv")
    print(json.dumps(evaluation['summary'], indent=2))


if __name__ == "__main__":
    test_manually()
