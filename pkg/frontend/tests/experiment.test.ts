import { describe, expect, it } from "vitest";

import {
  buildSchedule,
  ExperimentSession,
  threeZoomViews,
  type ExperimentDef,
  type NucleusRef,
} from "../src/experiment.js";
import { SIX_OPTIONS } from "../src/types.js";

function nuclei(n: number): NucleusRef[] {
  return Array.from({ length: n }, (_, i) => ({
    object_id: `n${String(i).padStart(2, "0")}`,
    spot_id: "s0000",
    x: 10 + 7 * i,
    y: 20 + 5 * i,
    radius: 4,
  }));
}

function def(overrides: Partial<ExperimentDef> = {}): ExperimentDef {
  return {
    experiment_id: "exp1",
    expert_id: "e0",
    nuclei: nuclei(10),
    n_repeats: 2,
    seed: 5,
    ...overrides,
  };
}

describe("schedule", () => {
  it("10 nuclei with 2 hidden repeats gives 12 prompts with linkage", () => {
    const schedule = buildSchedule(def());
    expect(schedule).toHaveLength(12);
    const repeats = schedule.filter((p) => p.isRepeat);
    expect(repeats).toHaveLength(2);
    for (const r of repeats) {
      // Linked by object id; transformed; shown after its original.
      expect(r.transform).not.toBe("none");
      const firstAt = schedule.findIndex(
        (p) => !p.isRepeat && p.nucleus.object_id === r.nucleus.object_id,
      );
      expect(firstAt).toBeGreaterThanOrEqual(0);
      expect(schedule.indexOf(r)).toBeGreaterThan(firstAt);
    }
    // Originals are each shown exactly once, untransformed.
    const originals = schedule.filter((p) => !p.isRepeat);
    expect(originals).toHaveLength(10);
    expect(new Set(originals.map((p) => p.nucleus.object_id)).size).toBe(10);
    expect(originals.every((p) => p.transform === "none")).toBe(true);
  });

  it("is deterministic in the seed and shuffled against the input order", () => {
    const a = buildSchedule(def());
    const b = buildSchedule(def());
    expect(a).toEqual(b);
    const c = buildSchedule(def({ seed: 6 }));
    expect(c).not.toEqual(a);
    expect(a.map((p) => p.nucleus.object_id)).not.toEqual(
      nuclei(10).map((n) => n.object_id).concat(["x", "x"]).slice(0, 12),
    );
  });

  it("rejects more repeats than nuclei", () => {
    expect(() => buildSchedule(def({ n_repeats: 11 }))).toThrow(/repeats/);
  });
});

describe("six-option prompt", () => {
  it("cannot advance with zero selections", () => {
    const s = new ExperimentSession(def());
    expect(s.advance()).toBe(false);
    expect(s.promptIndex).toBe(0);
    expect(s.rows).toHaveLength(0);
  });

  it("radio semantics make two selections unrepresentable", () => {
    const s = new ExperimentSession(def());
    s.select(1);
    s.select(4); // moves, does not add
    expect(s.selectedOption).toBe(4);
    s.select(4); // toggling the active option clears it
    expect(s.selectedOption).toBeNull();
    expect(s.advance()).toBe(false);
  });

  it("records one row per prompt with the chosen class and confidence", () => {
    const s = new ExperimentSession(def());
    while (!s.finished) {
      s.select(2);
      expect(s.advance()).toBe(true);
    }
    expect(s.rows).toHaveLength(12);
    const opt = SIX_OPTIONS[2];
    for (const row of s.rows) {
      expect(row.label).toBe(opt.label);
      expect(row.confidence).toBe(opt.confidence);
      expect(row.experiment_id).toBe("exp1");
      expect(row.expert_id).toBe("e0");
    }
    // Repeat rows carry the linkage: same object id, transform recorded.
    const repeatRows = s.rows.filter((r) => r.is_repeat);
    expect(repeatRows).toHaveLength(2);
    for (const r of repeatRows) {
      expect(r.transform).not.toBe("none");
      expect(s.rows.some((o) => !o.is_repeat && o.object_id === r.object_id)).toBe(true);
    }
  });

  it("optional staining follow-up lands in the row and resets per prompt", () => {
    const s = new ExperimentSession(def());
    s.select(0);
    s.setStainFollowUp("stained");
    s.advance();
    s.select(0);
    s.advance();
    expect(s.rows[0].stained).toBe("stained");
    expect(s.rows[1].stained).toBeNull();
  });
});

describe("resume", () => {
  it("abandoning at prompt 5 restores prompt 5 with answers intact", () => {
    const d = def();
    const s = new ExperimentSession(d);
    for (let i = 0; i < 5; i++) {
      s.select(i % 6);
      expect(s.advance()).toBe(true);
    }
    const saved = s.serialize();

    const resumed = ExperimentSession.resume(d, saved);
    expect(resumed.promptIndex).toBe(5);
    expect(resumed.rows).toEqual(s.rows);
    expect(resumed.schedule).toEqual(s.schedule);
    expect(resumed.current).toEqual(s.current);

    while (!resumed.finished) {
      resumed.select(0);
      resumed.advance();
    }
    expect(resumed.rows).toHaveLength(12);
  });

  it("refuses progress from a different experiment", () => {
    const saved = new ExperimentSession(def()).serialize();
    expect(() =>
      ExperimentSession.resume(def({ experiment_id: "other" }), saved),
    ).toThrow(/different experiment/);
  });
});

describe("three zoom views", () => {
  it("full spot plus 1/8 and 1/32 crops centered on the nucleus", () => {
    const n = nuclei(1)[0]; // at (10, 20)
    const views = threeZoomViews(n, 3000, 3000);
    expect(views).toHaveLength(3);
    expect(views[0]).toEqual({ x: 0, y: 0, width: 3000, height: 3000 });
    expect(views[1].width).toBe(375);
    expect(views[2].width).toBe(93.75);
    // Clamped into the image near the corner, still inside bounds.
    for (const v of views) {
      expect(v.x).toBeGreaterThanOrEqual(0);
      expect(v.y).toBeGreaterThanOrEqual(0);
      expect(v.x + v.width).toBeLessThanOrEqual(3000);
      expect(v.y + v.height).toBeLessThanOrEqual(3000);
    }
    // A central nucleus is actually centered.
    const central = threeZoomViews({ ...n, x: 1500, y: 1500 }, 3000, 3000);
    expect(central[1].x + central[1].width / 2).toBe(1500);
    expect(central[2].y + central[2].height / 2).toBe(1500);
  });
});
