/* Viewport math for the spot viewer.
 *
 * All positions live in level-0 image coordinates (full resolution);
 * the screen mapping is
 *
 *     screen = (image - viewport origin) * scale
 *
 * with scale = canvas width / viewport width. Pyramid levels only decide
 * which PNG is fetched for painting, they never change the coordinate
 * system, so overlays stay exact at any zoom.
 */

export type Point = { x: number; y: number };

export type Viewport = { x: number; y: number; width: number; height: number };

export type OverlayToggles = {
  annotations: boolean;
  detections: boolean;
  probabilityMap: boolean;
};

// Pyramid levels are 1x, 1/4x and 1/16x of the stored image.
export const LEVEL_FACTORS = [1, 4, 16] as const;

export function levelFactor(level: number): number {
  const f = LEVEL_FACTORS[level];
  if (f === undefined) throw new Error(`no pyramid level ${level}`);
  return f;
}

/* Pick the coarsest level that still has at least one stored pixel per
   screen pixel; fine exports stay sharp, far zooms fetch 1/16x. */
export function chooseLevel(scale: number): number {
  if (scale >= 1 / 4) return 0;
  if (scale >= 1 / 16) return 1;
  return 2;
}

export function clampViewport(vp: Viewport, imageWidth: number, imageHeight: number): Viewport {
  const width = Math.min(vp.width, imageWidth);
  const height = Math.min(vp.height, imageHeight);
  const x = Math.min(Math.max(vp.x, 0), imageWidth - width);
  const y = Math.min(Math.max(vp.y, 0), imageHeight - height);
  return { x, y, width, height };
}

export function imageToScreen(pt: Point, vp: Viewport, scale: number): Point {
  return { x: (pt.x - vp.x) * scale, y: (pt.y - vp.y) * scale };
}

export function screenToImage(pt: Point, vp: Viewport, scale: number): Point {
  return { x: pt.x / scale + vp.x, y: pt.y / scale + vp.y };
}

export class ViewState {
  spotId: string;
  imageWidth: number;
  imageHeight: number;
  viewport: Viewport;
  canvasWidth: number;
  canvasHeight: number;
  toggles: OverlayToggles = { annotations: true, detections: true, probabilityMap: false };

  constructor(
    spotId: string,
    imageWidth: number,
    imageHeight: number,
    canvasWidth: number,
    canvasHeight: number,
  ) {
    this.spotId = spotId;
    this.imageWidth = imageWidth;
    this.imageHeight = imageHeight;
    this.canvasWidth = canvasWidth;
    this.canvasHeight = canvasHeight;
    this.viewport = { x: 0, y: 0, width: imageWidth, height: imageHeight };
  }

  get scale(): number {
    return this.canvasWidth / this.viewport.width;
  }

  get level(): number {
    return chooseLevel(this.scale);
  }

  setViewport(vp: Viewport): void {
    // Keep the aspect locked to the canvas so circles stay circles.
    const height = (vp.width * this.canvasHeight) / this.canvasWidth;
    this.viewport = clampViewport(
      { ...vp, height },
      this.imageWidth,
      this.imageHeight,
    );
  }

  pan(dxScreen: number, dyScreen: number): void {
    const s = this.scale;
    this.setViewport({
      ...this.viewport,
      x: this.viewport.x - dxScreen / s,
      y: this.viewport.y - dyScreen / s,
    });
  }

  /* Zoom by `factor` keeping the image point under `anchor` (screen
     coordinates) fixed on screen. */
  zoomAt(anchor: Point, factor: number): void {
    const before = screenToImage(anchor, this.viewport, this.scale);
    const width = Math.max(8, this.viewport.width / factor);
    const scaleAfter = this.canvasWidth / width;
    this.setViewport({
      x: before.x - anchor.x / scaleAfter,
      y: before.y - anchor.y / scaleAfter,
      width,
      height: 0, // recomputed by setViewport
    });
  }

  toScreen(pt: Point): Point {
    return imageToScreen(pt, this.viewport, this.scale);
  }

  toImage(pt: Point): Point {
    return screenToImage(pt, this.viewport, this.scale);
  }
}
