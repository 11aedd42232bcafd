/* Canvas overlay painting. Geometry is computed by pure helpers so the
   exactness of overlay placement is testable without a rendering
   context; the draw functions are no-ops when no 2d context exists
   (headless test environments). */

import type { AnnotationWire, DetectionWire } from "./types.js";
import { CLASS_COLORS } from "./types.js";
import type { ViewState } from "./view.js";

export type ScreenCircle = { cx: number; cy: number; r: number; color: string };

export function annotationCircle(a: AnnotationWire, view: ViewState): ScreenCircle {
  const p = view.toScreen({ x: a.x, y: a.y });
  return { cx: p.x, cy: p.y, r: a.radius * view.scale, color: CLASS_COLORS[a.class] };
}

export function detectionCircle(
  d: DetectionWire,
  view: ViewState,
  radius: number,
): ScreenCircle {
  const p = view.toScreen({ x: d.x, y: d.y });
  return { cx: p.x, cy: p.y, r: radius * view.scale, color: "#1f77ff" };
}

function strokeCircle(ctx: CanvasRenderingContext2D, c: ScreenCircle, dashed: boolean): void {
  ctx.save();
  ctx.strokeStyle = c.color;
  ctx.lineWidth = 2;
  ctx.setLineDash(dashed ? [4, 3] : []);
  ctx.beginPath();
  ctx.arc(c.cx, c.cy, Math.max(c.r, 1), 0, 2 * Math.PI);
  ctx.stroke();
  ctx.restore();
}

export function drawAnnotations(
  ctx: CanvasRenderingContext2D | null,
  annotations: AnnotationWire[],
  view: ViewState,
): void {
  if (!ctx || !view.toggles.annotations) return;
  for (const a of annotations) strokeCircle(ctx, annotationCircle(a, view), false);
}

export function drawDetections(
  ctx: CanvasRenderingContext2D | null,
  detections: DetectionWire[],
  view: ViewState,
  radius: number,
): void {
  if (!ctx || !view.toggles.detections) return;
  for (const d of detections) strokeCircle(ctx, detectionCircle(d, view, radius), true);
}

export function drawImageLevel(
  ctx: CanvasRenderingContext2D | null,
  bitmap: CanvasImageSource | null,
  view: ViewState,
  factor: number,
): void {
  if (!ctx || !bitmap) return;
  // The level image is the full spot downsampled by `factor`; crop the
  // viewport out of it and stretch to the canvas.
  ctx.drawImage(
    bitmap,
    view.viewport.x / factor,
    view.viewport.y / factor,
    view.viewport.width / factor,
    view.viewport.height / factor,
    0,
    0,
    view.canvasWidth,
    view.canvasHeight,
  );
}

export function drawProbabilityOverlay(
  ctx: CanvasRenderingContext2D | null,
  bitmap: CanvasImageSource | null,
  view: ViewState,
  stride: number,
): void {
  if (!ctx || !bitmap || !view.toggles.probabilityMap) return;
  ctx.save();
  ctx.globalAlpha = 0.45;
  ctx.drawImage(
    bitmap,
    view.viewport.x / stride,
    view.viewport.y / stride,
    view.viewport.width / stride,
    view.viewport.height / stride,
    0,
    0,
    view.canvasWidth,
    view.canvasHeight,
  );
  ctx.restore();
}
