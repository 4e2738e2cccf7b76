/**
 * App wiring: annotation canvas, mask review strip, inpaint panel, preview.
 * Stateless with respect to computation: every pixel comes from the API.
 */

import { ApiClient } from './api';
import { AnnotateCanvas } from './annotate';
import { AppController } from './controller';
import { createMockFetch } from './mock';
import { restoreSession, serializeSession, SessionStore } from './state';

const params = new URLSearchParams(location.search);
const mock = params.get('mock') === '1';
const base = params.get('api') ?? '';

const api = new ApiClient(base, mock ? createMockFetch() : undefined);
const saved = localStorage.getItem('mvinpaint-session');
const store = saved ? restoreSession(saved) : new SessionStore();
const controller = new AppController(api, store);

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

const toast = (message: string) => {
  const box = el<HTMLDivElement>('toasts');
  const item = document.createElement('div');
  item.className = 'toast';
  item.textContent = message;
  item.onclick = () => item.remove();
  box.appendChild(item);
  setTimeout(() => item.remove(), 6000);
};

const canvas = el<HTMLCanvasElement>('annotate-canvas');
let annotator: AnnotateCanvas | null = null;

store.subscribe(() => {
  localStorage.setItem('mvinpaint-session', serializeSession(store));
  el<HTMLSpanElement>('progress').textContent = store.state.activeJobId
    ? `${store.state.activeJobKind}: ${(100 * store.state.jobProgress).toFixed(0)}%`
    : '';
  el<HTMLButtonElement>('btn-segment').disabled = controller.jobRunning;
  el<HTMLButtonElement>('btn-inpaint').disabled = controller.jobRunning;
});

async function openScene(): Promise<void> {
  const path = el<HTMLInputElement>('scene-path').value;
  try {
    const manifest = await controller.openScene(path);
    annotator = new AnnotateCanvas(canvas, store, api, manifest.intrinsics.w, manifest.intrinsics.h);
    annotator.onError = toast;
    annotator.setImages(api.viewUrl(manifest.scene_id, store.state.sourceView), '');
    renderThumbnails();
  } catch (err) {
    toast(`open failed: ${(err as Error).message}`);
  }
}

function renderThumbnails(): void {
  const strip = el<HTMLDivElement>('mask-strip');
  strip.replaceChildren();
  if (!controller.manifest || !store.state.sceneId) return;
  controller.manifest.frames.forEach((_, i) => {
    const cell = document.createElement('div');
    cell.className = 'thumb';
    const img = document.createElement('img');
    img.src = api.viewUrl(store.state.sceneId!, i);
    const overlay = document.createElement('img');
    overlay.className = 'overlay';
    overlay.src = `${api.maskUrl(store.state.sceneId!, i)}?t=${Date.now()}`;
    overlay.onerror = () => overlay.remove();
    cell.append(img, overlay);
    cell.onclick = () => {
      store.apply({ type: 'source-view', index: i });
      annotator?.setImages(api.viewUrl(store.state.sceneId!, i), '');
    };
    strip.appendChild(cell);
  });
}

async function refreshPreview(): Promise<void> {
  if (!store.state.sceneId || !controller.lastInpaintJob) return;
  const img = el<HTMLImageElement>('preview');
  img.src = `${controller.previewUrl()}&t=${Date.now()}`;
}

async function refreshMaskBadge(): Promise<void> {
  const badge = el<HTMLSpanElement>('iou-badge');
  const sceneId = store.state.sceneId;
  if (!sceneId) return;
  const metrics = await api.getMaskMetrics(sceneId).catch(() => null);
  if (!metrics) {
    badge.textContent = '';
    return;
  }
  const iou = metrics.current.mean_iou.toFixed(2);
  const delta = metrics.previous ? (metrics.current.mean_iou - metrics.previous.mean_iou).toFixed(2) : null;
  badge.textContent = delta === null ? `IoU ${iou}` : `IoU ${iou} (${Number(delta) >= 0 ? '+' : ''}${delta} vs previous)`;
}

el<HTMLButtonElement>('btn-open').onclick = openScene;
el<HTMLButtonElement>('btn-segment').onclick = async () => {
  try {
    await controller.runSegmentation();
    renderThumbnails();
    // overlay the newest source-view mask on the annotation canvas
    if (store.state.sceneId) {
      annotator?.setImages(
        api.viewUrl(store.state.sceneId, store.state.sourceView),
        `${api.maskUrl(store.state.sceneId, store.state.sourceView)}?t=${Date.now()}`,
      );
    }
    await refreshMaskBadge();
    toast('segmentation done');
  } catch (err) {
    toast(`segment failed: ${(err as Error).message}`);
  }
};
el<HTMLButtonElement>('btn-inpaint').onclick = async () => {
  try {
    await controller.runInpaint();
    toast('inpainting done');
    await refreshPreview();
  } catch (err) {
    toast(`inpaint failed: ${(err as Error).message}`);
  }
};

const dilate = el<HTMLInputElement>('dilate');
dilate.value = String(store.state.dilateIters);
dilate.oninput = () => {
  store.apply({ type: 'dilate', iters: Number(dilate.value) });
  el<HTMLSpanElement>('dilate-value').textContent = dilate.value;
};

const provider = el<HTMLSelectElement>('provider');
provider.onchange = () => store.apply({ type: 'provider', id: provider.value });

const slider = el<HTMLInputElement>('camera-path');
slider.oninput = async () => {
  store.apply({ type: 'preview', t: Number(slider.value) / 100 });
  await refreshPreview();
};

el<HTMLInputElement>('before-after').onchange = async (e) => {
  store.apply({ type: 'toggle-original', value: (e.target as HTMLInputElement).checked });
  await refreshPreview();
};

if (store.state.sceneId) {
  void controller.loadScene(store.state.sceneId).then((manifest) => {
    annotator = new AnnotateCanvas(canvas, store, api, manifest.intrinsics.w, manifest.intrinsics.h);
    annotator.onError = toast;
    annotator.setImages(api.viewUrl(manifest.scene_id, store.state.sourceView), '');
    renderThumbnails();
  });
}
