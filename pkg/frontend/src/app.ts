/* The annotator page: toolbar, canvas viewer and the glue between
 * gestures and API calls.
 *
 * Two rules shape everything here. First, the server is the only store:
 * each user action becomes exactly one API call, and reloading the page
 * rebuilds the entire view from GET requests, so nothing the user did
 * can live only in browser memory. Second, the page must stay usable
 * before images finish loading (and in headless test environments that
 * never paint), so all state flows through data structures and the
 * canvas is a pure projection of them.
 */

import { ApiClient, ApiError } from "./api.js";
import type {
  AnnotationWire,
  CorrectionRequest,
  DetectionsDoc,
  DetectionWire,
  NucleusClass,
  SpotDoc,
  SpotInfo,
  StainState,
} from "./types.js";
import { emptySpotDoc, SIX_OPTIONS } from "./types.js";
import { MarkingTool } from "./marker.js";
import { CorrectionQueue, QueueEntry } from "./queue.js";
import { ViewState, levelFactor } from "./view.js";
import {
  drawAnnotations,
  drawDetections,
  drawImageLevel,
  drawProbabilityOverlay,
} from "./overlays.js";

export type Mode = "mark" | "correct";

export type AppOptions = {
  canvasSize?: number;
  spotId?: string;
  detectionRadius?: number;
};

// Clicks select a detection when within this many screen pixels.
const HIT_RADIUS_PX = 12;

export class AnnotatorApp {
  readonly api: ApiClient;
  readonly root: HTMLElement;
  readonly queue: CorrectionQueue;
  readonly marker = new MarkingTool();

  spots: SpotInfo[] = [];
  spot: SpotInfo | null = null;
  view: ViewState | null = null;
  doc: SpotDoc | null = null;
  detections: DetectionsDoc | null = null;
  mode: Mode = "mark";

  private canvas!: HTMLCanvasElement;
  private statusEl!: HTMLElement;
  private badgeEl!: HTMLElement;
  private spotSelect!: HTMLSelectElement;
  private stainSelect!: HTMLSelectElement;
  private paletteButtons: HTMLButtonElement[] = [];
  private selectedOption = 0;
  private correctionPalette!: HTMLElement;
  private correctionButtons: HTMLButtonElement[] = [];
  private selectedCorrection = 0;
  private canvasSize: number;
  private detectionRadius: number;
  private levelImages: (CanvasImageSource | null)[] = [null, null, null];
  private pmapImage: CanvasImageSource | null = null;
  private pmapFactor = 1;
  private ops: Promise<void> = Promise.resolve();

  constructor(root: HTMLElement, api: ApiClient, options: AppOptions = {}) {
    this.root = root;
    this.api = api;
    this.canvasSize = options.canvasSize ?? 480;
    this.detectionRadius = options.detectionRadius ?? 7;
    this.queue = new CorrectionQueue((spotId, req) =>
      this.api.postCorrection(spotId, req),
    );
    this.queue.onChange = () => this.renderChrome();
    this.queue.onApplied = (entry) => this.afterCorrection(entry);
    this.buildDom();
    if (options.spotId) this.pendingSpotId = options.spotId;
  }

  private pendingSpotId: string | null = null;

  /* ---- lifecycle ---- */

  async load(): Promise<void> {
    this.spots = await this.api.listSpots();
    this.spotSelect.innerHTML = "";
    for (const s of this.spots) {
      const opt = document.createElement("option");
      opt.value = s.spot_id;
      opt.textContent = `${s.spot_id} (${s.patient_id})`;
      this.spotSelect.appendChild(opt);
    }
    const first = this.pendingSpotId ?? this.spots[0]?.spot_id;
    if (first) await this.open(first);
  }

  async open(spotId: string): Promise<void> {
    const spot = this.spots.find((s) => s.spot_id === spotId);
    if (!spot) throw new Error(`unknown spot ${spotId}`);
    this.spot = spot;
    this.spotSelect.value = spotId;
    this.view = new ViewState(
      spotId,
      spot.width,
      spot.height,
      this.canvasSize,
      this.canvasSize,
    );
    this.levelImages = [null, null, null];
    this.pmapImage = null;

    try {
      this.doc = await this.api.getAnnotations(spotId);
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) {
        this.doc = emptySpotDoc(spot); // nothing marked on this spot yet
      } else {
        throw err;
      }
    }

    try {
      this.detections = await this.api.getDetections(spotId);
      this.setStatus(`${this.detections.detections.length} detections, model v${this.detections.forest_version}`);
    } catch (err) {
      if (err instanceof ApiError && err.status === 503) {
        this.detections = null;
        this.setStatus("no model loaded; detection overlay unavailable");
      } else {
        throw err;
      }
    }
    this.rebuildCorrectionPalette();

    void this.loadLevelImage(this.view.level);
    this.render();
  }

  /* Resolves when every enqueued API interaction has settled. */
  async whenIdle(): Promise<void> {
    await this.ops;
    await this.queue.whenIdle();
    await this.ops;
  }

  /* ---- gestures ---- */

  private screenPoint(ev: { clientX: number; clientY: number }): { x: number; y: number } {
    const rect = this.canvas.getBoundingClientRect();
    return { x: ev.clientX - rect.left, y: ev.clientY - rect.top };
  }

  private onPointerDown(ev: PointerEvent): void {
    if (!this.view) return;
    if (this.mode === "mark") {
      this.marker.pointerDown(this.view.toImage(this.screenPoint(ev)));
      this.render();
    }
  }

  private onPointerMove(ev: PointerEvent): void {
    if (!this.view || !this.marker.active) return;
    this.marker.pointerMove(this.view.toImage(this.screenPoint(ev)));
    this.render();
  }

  private onPointerUp(ev: PointerEvent): void {
    if (!this.view) return;
    const screen = this.screenPoint(ev);
    if (this.mode === "mark") {
      const outcome = this.marker.pointerUp(this.view.toImage(screen));
      if (outcome.kind === "marked") {
        this.markNucleus(outcome.gesture.center, outcome.gesture.radius);
      } else if (outcome.kind === "rejected") {
        this.setStatus(outcome.reason);
      }
      this.render();
    } else {
      const det = this.detectionAtScreen(screen);
      if (det) this.correctDetection(det);
    }
  }

  private detectionAtScreen(screen: { x: number; y: number }): DetectionWire | null {
    if (!this.view || !this.detections) return null;
    let best: DetectionWire | null = null;
    let bestDist = HIT_RADIUS_PX;
    for (const d of this.detections.detections) {
      const p = this.view.toScreen(d);
      const dist = Math.hypot(p.x - screen.x, p.y - screen.y);
      if (dist <= bestDist) {
        best = d;
        bestDist = dist;
      }
    }
    return best;
  }

  /* ---- mutations ---- */

  markNucleus(center: { x: number; y: number }, radius: number): void {
    if (!this.doc || !this.view) return;
    const opt = SIX_OPTIONS[this.selectedOption];
    const annotation: AnnotationWire = {
      x: center.x,
      y: center.y,
      radius,
      class: opt.label,
      stained: this.stainFollowUp(),
      confidence: opt.confidence,
      expert_id: this.api.expertId,
      session: this.api.sessionId,
      timestamp_iso8601: null,
    };
    const doc = this.doc;
    doc.annotations.push(annotation);
    this.render();
    this.enqueue(async () => {
      try {
        const n = await this.api.putAnnotations(doc);
        this.setStatus(`${n} annotations stored`);
      } catch (err) {
        // Server said no: drop the optimistic circle, surface the reason.
        const at = doc.annotations.indexOf(annotation);
        if (at >= 0) doc.annotations.splice(at, 1);
        this.setStatus(
          err instanceof ApiError ? `mark rejected: ${err.message}` : String(err),
        );
        this.render();
      }
    });
  }

  correctDetection(det: DetectionWire): void {
    if (!this.view) return;
    const label = this.correctionLabel;
    if (label === null) {
      this.setStatus("no model loaded; corrections unavailable");
      return;
    }
    const req: CorrectionRequest = {
      x: Math.round(det.x),
      y: Math.round(det.y),
      asserted_label: label,
      expert_id: this.api.expertId,
      session: this.api.sessionId,
    };
    this.queue.submit(this.view.spotId, req);
    this.renderChrome();
  }

  private afterCorrection(entry: QueueEntry): void {
    const r = entry.response;
    if (r) {
      this.setStatus(
        `correction applied: margin ${r.margin_before.toFixed(3)} -> ` +
          `${r.margin_after.toFixed(3)}, model v${r.forest_version}`,
      );
    }
    // Fetch the learner's response before the expert acts again.
    this.enqueue(() => this.refreshOverlays());
  }

  async refreshOverlays(): Promise<void> {
    if (!this.view) return;
    try {
      this.detections = await this.api.getDetections(this.view.spotId);
      this.rebuildCorrectionPalette();
    } catch {
      // keep the previous overlay when the model is busy or gone
    }
    this.pmapImage = null;
    if (this.view.toggles.probabilityMap) await this.loadProbabilityMap();
    this.render();
  }

  /* ---- experiment hook ---- */

  stainFollowUp(): StainState | null {
    const v = this.stainSelect.value;
    return v === "stained" || v === "unstained" ? v : null;
  }

  selectOption(idx: number): void {
    if (idx < 0 || idx >= SIX_OPTIONS.length) return;
    this.selectedOption = idx;
    this.renderChrome();
  }

  get assertedLabel(): NucleusClass {
    return SIX_OPTIONS[this.selectedOption].label;
  }

  selectCorrection(idx: number): void {
    const classes = this.detections?.classes ?? [];
    if (idx < 0 || idx >= classes.length) return;
    this.selectedCorrection = idx;
    this.renderChrome();
  }

  /* The label a detection click would assert, from the model's own
     vocabulary; null until a detections document has arrived. */
  get correctionLabel(): string | null {
    return this.detections?.classes[this.selectedCorrection] ?? null;
  }

  /* ---- images ---- */

  private async loadLevelImage(level: number): Promise<void> {
    if (this.levelImages[level] !== null || !this.view) return;
    try {
      const buf = await this.api.fetchImage(this.view.spotId, level);
      this.levelImages[level] = await decodePng(buf);
      this.render();
    } catch {
      // headless or offline: geometry still works, painting is skipped
    }
  }

  private async loadProbabilityMap(): Promise<void> {
    if (!this.view || !this.spot) return;
    try {
      const buf = await this.api.fetchProbabilityMap(this.view.spotId);
      const img = await decodePng(buf);
      this.pmapImage = img;
      const w = (img as HTMLImageElement).naturalWidth || (img as ImageBitmap).width;
      this.pmapFactor = w ? this.spot.width / w : 1;
      this.render();
    } catch {
      this.pmapImage = null;
    }
  }

  /* ---- DOM ---- */

  private buildDom(): void {
    this.root.innerHTML = "";
    const bar = document.createElement("div");
    bar.className = "toolbar";

    this.spotSelect = document.createElement("select");
    this.spotSelect.id = "spot-select";
    this.spotSelect.addEventListener("change", () => {
      this.enqueue(() => this.open(this.spotSelect.value));
    });
    bar.appendChild(this.spotSelect);

    const markBtn = document.createElement("button");
    markBtn.id = "mode-mark";
    markBtn.textContent = "mark";
    const correctBtn = document.createElement("button");
    correctBtn.id = "mode-correct";
    correctBtn.textContent = "correct";
    markBtn.addEventListener("click", () => this.setMode("mark"));
    correctBtn.addEventListener("click", () => this.setMode("correct"));
    bar.appendChild(markBtn);
    bar.appendChild(correctBtn);

    const palette = document.createElement("div");
    palette.id = "palette";
    SIX_OPTIONS.forEach((opt, i) => {
      const b = document.createElement("button");
      b.dataset.opt = String(i);
      b.textContent = `${opt.confidence} ${opt.label}`;
      b.addEventListener("click", () => this.selectOption(i));
      palette.appendChild(b);
      this.paletteButtons.push(b);
    });
    bar.appendChild(palette);

    // Filled in once the server has told us the model's class list.
    this.correctionPalette = document.createElement("div");
    this.correctionPalette.id = "correction-palette";
    bar.appendChild(this.correctionPalette);

    this.stainSelect = document.createElement("select");
    this.stainSelect.id = "stain-follow";
    for (const v of ["", "stained", "unstained"]) {
      const o = document.createElement("option");
      o.value = v;
      o.textContent = v === "" ? "stain: n/a" : v;
      this.stainSelect.appendChild(o);
    }
    bar.appendChild(this.stainSelect);

    for (const [id, key] of [
      ["toggle-annotations", "annotations"],
      ["toggle-detections", "detections"],
      ["toggle-pmap", "probabilityMap"],
    ] as const) {
      const label = document.createElement("label");
      const box = document.createElement("input");
      box.type = "checkbox";
      box.id = id;
      box.checked = key !== "probabilityMap";
      box.addEventListener("change", () => {
        if (!this.view) return;
        this.view.toggles[key] = box.checked;
        if (key === "probabilityMap" && box.checked && !this.pmapImage) {
          this.enqueue(() => this.loadProbabilityMap());
        }
        this.render();
      });
      label.appendChild(box);
      label.appendChild(document.createTextNode(key));
      bar.appendChild(label);
    }

    this.badgeEl = document.createElement("span");
    this.badgeEl.id = "pending-badge";
    this.badgeEl.style.display = "none";
    bar.appendChild(this.badgeEl);

    this.statusEl = document.createElement("span");
    this.statusEl.id = "status";
    bar.appendChild(this.statusEl);

    this.root.appendChild(bar);

    this.canvas = document.createElement("canvas");
    this.canvas.id = "viewer";
    this.canvas.width = this.canvasSize;
    this.canvas.height = this.canvasSize;
    this.canvas.addEventListener("pointerdown", (ev) => this.onPointerDown(ev));
    this.canvas.addEventListener("pointermove", (ev) => this.onPointerMove(ev));
    this.canvas.addEventListener("pointerup", (ev) => this.onPointerUp(ev));
    this.canvas.addEventListener("pointercancel", () => {
      this.marker.cancel();
      this.render();
    });
    this.canvas.addEventListener("wheel", (ev) => {
      if (!this.view) return;
      ev.preventDefault();
      const factor = ev.deltaY < 0 ? 1.25 : 0.8;
      this.view.zoomAt(this.screenPoint(ev), factor);
      void this.loadLevelImage(this.view.level);
      this.render();
    });
    this.root.appendChild(this.canvas);
  }

  private rebuildCorrectionPalette(): void {
    const classes = this.detections?.classes ?? [];
    this.correctionPalette.innerHTML = "";
    this.correctionButtons = [];
    classes.forEach((cls, i) => {
      const b = document.createElement("button");
      b.dataset.cls = String(i);
      b.textContent = cls;
      b.addEventListener("click", () => this.selectCorrection(i));
      this.correctionPalette.appendChild(b);
      this.correctionButtons.push(b);
    });
    if (this.selectedCorrection >= classes.length) this.selectedCorrection = 0;
    this.renderChrome();
  }

  setMode(mode: Mode): void {
    this.mode = mode;
    this.marker.cancel();
    this.renderChrome();
  }

  setStatus(text: string): void {
    this.statusEl.textContent = text;
    if (this.queue.needsSessionRefresh) {
      this.statusEl.textContent = `session conflict: reload to continue (${text})`;
    }
  }

  /* ---- painting ---- */

  private renderChrome(): void {
    const pending = this.queue.pendingCount;
    this.badgeEl.textContent = pending > 0 ? `${pending} pending` : "";
    this.badgeEl.style.display = pending > 0 ? "inline" : "none";
    if (this.queue.needsSessionRefresh) {
      this.statusEl.textContent = "session conflict: reload to continue";
    }
    this.paletteButtons.forEach((b, i) => {
      b.classList.toggle("active", i === this.selectedOption);
    });
    this.correctionButtons.forEach((b, i) => {
      b.classList.toggle("active", i === this.selectedCorrection);
    });
    // Each mode shows only its own label choices.
    const markPalette = this.root.querySelector<HTMLElement>("#palette");
    if (markPalette) markPalette.style.display = this.mode === "mark" ? "" : "none";
    this.correctionPalette.style.display = this.mode === "correct" ? "" : "none";
  }

  render(): void {
    this.renderChrome();
    if (!this.view) return;
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return; // headless: state above is the whole contract
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    const level = this.view.level;
    drawImageLevel(ctx, this.levelImages[level], this.view, levelFactor(level));
    drawProbabilityOverlay(ctx, this.pmapImage, this.view, this.pmapFactor);
    if (this.doc) drawAnnotations(ctx, this.doc.annotations, this.view);
    if (this.detections) {
      drawDetections(ctx, this.detections.detections, this.view, this.detectionRadius);
    }
    const preview = this.marker.preview;
    if (preview && preview.radius > 0) {
      ctx.save();
      ctx.strokeStyle = "#888888";
      ctx.setLineDash([3, 3]);
      const c = this.view.toScreen(preview.center);
      ctx.beginPath();
      ctx.arc(c.x, c.y, preview.radius * this.view.scale, 0, 2 * Math.PI);
      ctx.stroke();
      ctx.restore();
    }
  }

  private enqueue(fn: () => Promise<void> | void): void {
    this.ops = this.ops
      .then(fn)
      .catch((err) => this.setStatus(String(err)));
  }
}

/* Decode PNG bytes into something drawImage accepts. Browsers take the
   createImageBitmap path; environments without image decoding reject
   and the caller skips painting. */
async function decodePng(buf: ArrayBuffer): Promise<CanvasImageSource> {
  const blob = new Blob([buf], { type: "image/png" });
  if (typeof createImageBitmap === "function") {
    return createImageBitmap(blob);
  }
  const url = URL.createObjectURL(blob);
  try {
    const img = new Image();
    await new Promise<void>((resolve, reject) => {
      img.onload = () => resolve();
      img.onerror = () => reject(new Error("image decode failed"));
      img.src = url;
    });
    return img;
  } finally {
    URL.revokeObjectURL(url);
  }
}
