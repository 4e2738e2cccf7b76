/**
 * Annotation canvas controller: left-click adds a positive point, Alt/right
 * click adds a negative one, drag pans, wheel zooms, clicking an existing
 * point deletes it. Points are stored in image coordinates; every PUT happens
 * immediately on change. Drawing degrades to a no-op without a 2D context
 * (headless tests drive the event logic only).
 */

import type { ApiClient } from './api';
import type { SessionStore } from './state';

const POINT_HIT_RADIUS_PX = 6;

export interface ViewTransform {
  zoom: number;
  panX: number;
  panY: number;
}

export function imageToCanvas(t: ViewTransform, u: number, v: number): [number, number] {
  return [u * t.zoom + t.panX, v * t.zoom + t.panY];
}

export function canvasToImage(t: ViewTransform, x: number, y: number): [number, number] {
  return [(x - t.panX) / t.zoom, (y - t.panY) / t.zoom];
}

export class AnnotateCanvas {
  transform: ViewTransform = { zoom: 1, panX: 0, panY: 0 };
  imageWidth: number;
  imageHeight: number;
  onError: (message: string) => void = () => {};
  private ctx: CanvasRenderingContext2D | null;
  private dragging = false;
  private dragMoved = false;
  private last: [number, number] = [0, 0];
  private overlayUrl = '';
  private viewUrl = '';

  constructor(
    private canvas: HTMLCanvasElement,
    private store: SessionStore,
    private api: ApiClient,
    imageWidth: number,
    imageHeight: number,
  ) {
    this.imageWidth = imageWidth;
    this.imageHeight = imageHeight;
    this.ctx = canvas.getContext ? canvas.getContext('2d') : null;
    canvas.addEventListener('mousedown', this.onMouseDown);
    canvas.addEventListener('mousemove', this.onMouseMove);
    canvas.addEventListener('mouseup', this.onMouseUp);
    canvas.addEventListener('wheel', this.onWheel, { passive: false });
    canvas.addEventListener('contextmenu', (e) => e.preventDefault());
    store.subscribe(() => this.draw());
  }

  setImages(viewUrl: string, overlayUrl: string): void {
    this.viewUrl = viewUrl;
    this.overlayUrl = overlayUrl;
    this.draw();
  }

  private onMouseDown = (e: MouseEvent): void => {
    this.dragging = true;
    this.dragMoved = false;
    this.last = [e.offsetX, e.offsetY];
  };

  private onMouseMove = (e: MouseEvent): void => {
    if (!this.dragging) return;
    const dx = e.offsetX - this.last[0];
    const dy = e.offsetY - this.last[1];
    if (Math.abs(dx) + Math.abs(dy) > 2) this.dragMoved = true;
    if (this.dragMoved) {
      this.transform.panX += dx;
      this.transform.panY += dy;
      this.last = [e.offsetX, e.offsetY];
      this.draw();
    }
  };

  private onMouseUp = (e: MouseEvent): void => {
    const wasDrag = this.dragMoved;
    this.dragging = false;
    this.dragMoved = false;
    if (wasDrag) return;
    const [u, v] = canvasToImage(this.transform, e.offsetX, e.offsetY);
    if (u < 0 || v < 0 || u >= this.imageWidth || v >= this.imageHeight) return;
    const hit = this.hitTest(u, v);
    if (hit >= 0) {
      this.store.apply({ type: 'delete-point', index: hit });
    } else {
      const polarity = e.button === 2 || e.altKey ? 'negative' : 'positive';
      this.store.apply({ type: 'add-point', point: { u, v, polarity } });
    }
    void this.pushAnnotations();
  };

  private onWheel = (e: WheelEvent): void => {
    e.preventDefault();
    const factor = e.deltaY < 0 ? 1.15 : 1 / 1.15;
    // zoom about the cursor: the image point under it stays fixed
    const [u, v] = canvasToImage(this.transform, e.offsetX, e.offsetY);
    this.transform.zoom *= factor;
    this.transform.panX = e.offsetX - u * this.transform.zoom;
    this.transform.panY = e.offsetY - v * this.transform.zoom;
    this.draw();
  };

  hitTest(u: number, v: number): number {
    const r = POINT_HIT_RADIUS_PX / this.transform.zoom;
    return this.store.state.points.findIndex((p) => Math.hypot(p.u - u, p.v - v) <= r);
  }

  async pushAnnotations(): Promise<void> {
    const { sceneId } = this.store.state;
    if (!sceneId || this.store.annotations().positive.length === 0) return;
    try {
      await this.api.putAnnotations(sceneId, this.store.annotations());
    } catch (err) {
      this.onError(`saving annotations failed: ${(err as Error).message}`);
    }
  }

  draw(): void {
    if (!this.ctx) return;
    const ctx = this.ctx;
    ctx.clearRect(0, 0, this.canvas.width, this.canvas.height);
    this.drawLayer(this.viewUrl, 1.0);
    this.drawLayer(this.overlayUrl, 0.45);
    for (const p of this.store.state.points) {
      const [x, y] = imageToCanvas(this.transform, p.u, p.v);
      ctx.beginPath();
      ctx.arc(x, y, 5, 0, Math.PI * 2);
      ctx.fillStyle = p.polarity === 'positive' ? 'rgba(46, 204, 113, 0.9)' : 'rgba(231, 76, 60, 0.9)';
      ctx.fill();
      ctx.strokeStyle = '#fff';
      ctx.stroke();
    }
  }

  private drawLayer(url: string, alpha: number): void {
    if (!url || !this.ctx) return;
    const img = new Image();
    const ctx = this.ctx;
    const t = this.transform;
    const w = this.imageWidth;
    const h = this.imageHeight;
    img.onload = () => {
      ctx.globalAlpha = alpha;
      ctx.drawImage(img, t.panX, t.panY, w * t.zoom, h * t.zoom);
      ctx.globalAlpha = 1.0;
    };
    img.src = url;
  }
}
