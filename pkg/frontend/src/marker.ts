/* The nucleus marking gesture, pen-first: put the pen down on the
   nucleus center, pull outward until the circle hugs the membrane, lift.
   The whole tool works from pointer events alone so pen, touch and mouse
   behave identically. */

import type { Point } from "./view.js";

export type MarkGesture = { center: Point; radius: number };

export type MarkOutcome =
  | { kind: "marked"; gesture: MarkGesture }
  | { kind: "rejected"; reason: string }
  | { kind: "ignored" };

type DragState = { center: Point; radius: number } | null;

export class MarkingTool {
  private drag: DragState = null;

  get active(): boolean {
    return this.drag !== null;
  }

  /* Live radius during the drag, for the rubber-band preview. */
  get preview(): MarkGesture | null {
    return this.drag ? { center: this.drag.center, radius: this.drag.radius } : null;
  }

  pointerDown(imagePt: Point): void {
    this.drag = { center: imagePt, radius: 0 };
  }

  pointerMove(imagePt: Point): void {
    if (!this.drag) return;
    this.drag.radius = Math.hypot(
      imagePt.x - this.drag.center.x,
      imagePt.y - this.drag.center.y,
    );
  }

  pointerUp(imagePt: Point): MarkOutcome {
    if (!this.drag) return { kind: "ignored" };
    const center = this.drag.center;
    const radius = Math.hypot(imagePt.x - center.x, imagePt.y - center.y);
    this.drag = null;
    if (radius <= 0) return { kind: "rejected", reason: "radius required" };
    return { kind: "marked", gesture: { center, radius } };
  }

  cancel(): void {
    this.drag = null;
  }
}
