/* Nuclei classification experiment.
 *
 * A definition lists nuclei to be judged; the session presents them in
 * randomized order with a few hidden repeats whose patch is flipped or
 * rotated by 90 degrees, so intra-observer consistency can be measured
 * without the expert recognizing the duplicate. Each prompt shows three
 * zoom views and the six class/confidence buttons; answers become
 * label-matrix rows keyed by object id, which is what links a repeat to
 * its original.
 */

import type { Confidence, NucleusClass, StainState } from "./types.js";
import { SIX_OPTIONS } from "./types.js";
import type { Viewport } from "./view.js";
import { clampViewport } from "./view.js";

export type NucleusRef = {
  object_id: string;
  spot_id: string;
  x: number;
  y: number;
  radius: number;
};

export type ExperimentDef = {
  experiment_id: string;
  expert_id: string;
  nuclei: NucleusRef[];
  n_repeats: number;
  seed: number;
};

export type PatchTransform = "none" | "flip-h" | "flip-v" | "rot90" | "rot270";

export type ScheduledPrompt = {
  nucleus: NucleusRef;
  transform: PatchTransform;
  isRepeat: boolean;
};

export type LabelMatrixRow = {
  experiment_id: string;
  expert_id: string;
  object_id: string;
  label: NucleusClass;
  confidence: Confidence;
  stained: StainState | null;
  is_repeat: boolean;
  transform: PatchTransform;
};

// Deterministic PRNG so a schedule can be rebuilt from (definition,
// seed) alone, which is what makes sessions resumable.
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function shuffled<T>(items: T[], rng: () => number): T[] {
  const out = items.slice();
  for (let i = out.length - 1; i > 0; i--) {
    const j = Math.floor(rng() * (i + 1));
    [out[i], out[j]] = [out[j], out[i]];
  }
  return out;
}

const REPEAT_TRANSFORMS: PatchTransform[] = ["flip-h", "flip-v", "rot90", "rot270"];

/* Randomized order with hidden repeats. Every repeat is inserted after
   its original so the second sighting is the transformed one. */
export function buildSchedule(def: ExperimentDef): ScheduledPrompt[] {
  if (def.n_repeats > def.nuclei.length) {
    throw new Error("more repeats than nuclei");
  }
  const rng = mulberry32(def.seed);
  const schedule: ScheduledPrompt[] = shuffled(def.nuclei, rng).map((nucleus) => ({
    nucleus,
    transform: "none",
    isRepeat: false,
  }));
  const repeated = shuffled(schedule.slice(), rng).slice(0, def.n_repeats);
  for (const original of repeated) {
    const at = schedule.indexOf(original);
    const transform = REPEAT_TRANSFORMS[Math.floor(rng() * REPEAT_TRANSFORMS.length)];
    const slot = at + 1 + Math.floor(rng() * (schedule.length - at));
    schedule.splice(slot, 0, {
      nucleus: original.nucleus,
      transform,
      isRepeat: true,
    });
  }
  return schedule;
}

/* The three zoom stages shown per prompt: the whole spot for context,
   then 1/8 and 1/32 of the spot width centered on the nucleus. The
   divisors are defaults, adjustable during setup. */
export function threeZoomViews(
  nucleus: NucleusRef,
  imageWidth: number,
  imageHeight: number,
  divisors: [number, number] = [8, 32],
): Viewport[] {
  const views: Viewport[] = [
    { x: 0, y: 0, width: imageWidth, height: imageHeight },
  ];
  for (const d of divisors) {
    const w = Math.max(8, imageWidth / d);
    const h = Math.max(8, imageHeight / d);
    views.push(
      clampViewport(
        { x: nucleus.x - w / 2, y: nucleus.y - h / 2, width: w, height: h },
        imageWidth,
        imageHeight,
      ),
    );
  }
  return views;
}

type Progress = {
  experiment_id: string;
  index: number;
  selected: number | null;
  stained: StainState | null;
  rows: LabelMatrixRow[];
};

export class ExperimentSession {
  readonly def: ExperimentDef;
  readonly schedule: ScheduledPrompt[];
  rows: LabelMatrixRow[] = [];
  private index = 0;
  private selected: number | null = null;
  private stained: StainState | null = null;

  constructor(def: ExperimentDef) {
    this.def = def;
    this.schedule = buildSchedule(def);
  }

  get promptIndex(): number {
    return this.index;
  }

  get finished(): boolean {
    return this.index >= this.schedule.length;
  }

  get current(): ScheduledPrompt | null {
    return this.finished ? null : this.schedule[this.index];
  }

  get selectedOption(): number | null {
    return this.selected;
  }

  /* Radio semantics over the six buttons: picking another option moves
     the selection, picking the active one clears it. Two selections at
     once are unrepresentable. */
  select(option: number): void {
    if (option < 0 || option >= SIX_OPTIONS.length) {
      throw new Error(`option out of range: ${option}`);
    }
    this.selected = this.selected === option ? null : option;
  }

  setStainFollowUp(state: StainState | null): void {
    this.stained = state;
  }

  /* Record the answer and move on. Refuses unless exactly one of the
     six options is selected. */
  advance(): boolean {
    const prompt = this.current;
    if (!prompt || this.selected === null) return false;
    const opt = SIX_OPTIONS[this.selected];
    this.rows.push({
      experiment_id: this.def.experiment_id,
      expert_id: this.def.expert_id,
      object_id: prompt.nucleus.object_id,
      label: opt.label,
      confidence: opt.confidence,
      stained: this.stained,
      is_repeat: prompt.isRepeat,
      transform: prompt.transform,
    });
    this.index += 1;
    this.selected = null;
    this.stained = null;
    return true;
  }

  /* Progress survives abandoning the browser: the schedule itself is
     reproducible from the definition, so only the cursor and the rows
     need to be kept. */
  serialize(): string {
    const p: Progress = {
      experiment_id: this.def.experiment_id,
      index: this.index,
      selected: this.selected,
      stained: this.stained,
      rows: this.rows,
    };
    return JSON.stringify(p);
  }

  static resume(def: ExperimentDef, saved: string): ExperimentSession {
    const p = JSON.parse(saved) as Progress;
    if (p.experiment_id !== def.experiment_id) {
      throw new Error("progress belongs to a different experiment");
    }
    const session = new ExperimentSession(def);
    session.index = p.index;
    session.selected = p.selected;
    session.stained = p.stained;
    session.rows = p.rows;
    return session;
  }
}
