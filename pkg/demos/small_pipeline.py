"""Run every stage on a small synthetic dataset and show what was learned.

Usage: python demos/small_pipeline.py [OUT_DIR]
"""
import json
import sys

from segmatch import keyseg, pipeline

out = sys.argv[1] if len(sys.argv) > 1 else "demo_run"
cfg = pipeline.PipelineConfig(out_dir=out, num_classes=4, flows_per_class=800, embed_dim=32,
                              channels=32, epochs=10, sweep_thresholds=(0.5, 2.0, 8.0))
report = pipeline.cmd_run(cfg)
run = pipeline.RunDir(out)

motifs = json.loads(run.motifs.read_text())
print("planted motifs (jitter +/-%d):" % motifs["jitter"])
for c, per in enumerate(motifs["motifs"]):
    print(f"  class {c}: {per}")

kept = keyseg.select(keyseg.load_segments(run.segments.read_text()), cfg.score_threshold)
print(f"\n{len(kept)} Key Segments kept at S={cfg.score_threshold}; best per class:")
for c in range(cfg.num_classes):
    mine = [s for s in kept if s.class_id == c]
    if mine:
        s = mine[0]
        print(f"  class {c}: ranges {s.ranges} score {s.score:.1f}")

print("\nreport:")
for k in ("flows", "accuracy", "macro_f1", "segment_matching_rate", "segment_accuracy",
          "backup_accuracy", "motif_recovery", "bits_per_flow"):
    print(f"  {k:<22} {report[k]}")
print("\nthreshold sweep:")
print(run.sweep_tsv.read_text())
