/**
 * End-to-end against the real service: spawns the Python server, generates
 * the synthetic demo scene, then drives the full annotate -> segment ->
 * review -> inpaint -> before/after preview flow through the app layers.
 * Run with `npm run test:e2e` (requires the Python package installed).
 */

import { spawn, execFileSync, type ChildProcess } from 'node:child_process';
import { mkdtempSync, rmSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';
import { afterAll, beforeAll, describe, expect, it } from 'vitest';
import { ApiClient } from '../src/api';
import { AnnotateCanvas } from '../src/annotate';
import { AppController } from '../src/controller';
import { restoreSession, serializeSession, SessionStore } from '../src/state';

const PY = process.env.PYTHON ?? 'python3';
const PORT = 8931;
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess | null = null;
let workdir = '';
let sceneDir = '';

const TINY_CONFIG = {
  resolution: 16,
  iterations: 60,
  raysPerBatch: 512,
  nSamples: 24,
  coarseStages: [[2, 40]] as [number, number][],
};

async function waitForServer(): Promise<void> {
  for (let i = 0; i < 120; i++) {
    try {
      const res = await fetch(`${BASE}/docs`);
      if (res.ok) return;
    } catch {
      /* not up yet */
    }
    await new Promise((r) => setTimeout(r, 500));
  }
  throw new Error('service did not come up');
}

function clickAt(canvas: HTMLCanvasElement, x: number, y: number, extra: MouseEventInit = {}): void {
  for (const type of ['mousedown', 'mouseup']) {
    const event = new MouseEvent(type, { bubbles: true, ...extra });
    Object.defineProperty(event, 'offsetX', { value: x });
    Object.defineProperty(event, 'offsetY', { value: y });
    canvas.dispatchEvent(event);
  }
}

beforeAll(async () => {
  workdir = mkdtempSync(join(tmpdir(), 'mvinpaint-e2e-'));
  sceneDir = join(workdir, 'demo');
  execFileSync(PY, ['-m', 'mvinpaint.cli', 'demo', '--out', sceneDir, '--views', '8', '--size', '48'], {
    stdio: 'inherit',
  });
  server = spawn(
    PY,
    ['-m', 'mvinpaint.cli', 'serve', '--port', String(PORT), '--data-root', join(workdir, 'data')],
    { stdio: 'ignore' },
  );
  await waitForServer();
}, 120_000);

afterAll(() => {
  server?.kill('SIGTERM');
  rmSync(workdir, { recursive: true, force: true });
});

describe('full flow against the real service', () => {
  const api = new ApiClient(BASE);
  const store = new SessionStore();
  const controller = new AppController(api, store, TINY_CONFIG);

  it('annotate -> segment -> review -> inpaint -> preview', async () => {
    const manifest = await controller.openScene(sceneDir, 'e2e-demo');
    expect(manifest.frames).toHaveLength(8);

    // click points on the source view through the canvas widget
    const canvas = document.createElement('canvas');
    canvas.width = 96;
    canvas.height = 96;
    const widget = new AnnotateCanvas(canvas, store, api, manifest.intrinsics.w, manifest.intrinsics.h);
    clickAt(canvas, 24, 25); // object center (demo box projects near the middle)
    clickAt(canvas, 4, 4, { altKey: true }); // background point
    expect(store.state.points).toHaveLength(2);
    await widget.pushAnnotations();

    // the service echoes the same annotation document
    const echoed = await api.getAnnotations(manifest.scene_id);
    expect(echoed.positive).toEqual(store.annotations().positive);
    expect(echoed.negative).toEqual(store.annotations().negative);

    // segment and review masks
    const segJob = await controller.runSegmentation(1);
    expect(segJob.state).toBe('done');
    for (let i = 0; i < manifest.frames.length; i++) {
      const url = await api.fetchImage(api.maskUrl(manifest.scene_id, i));
      expect(url).not.toBe('');
    }

    // the demo scene ships ground-truth masks, so the IoU badge has data
    const metrics = await api.getMaskMetrics(manifest.scene_id);
    expect(metrics).not.toBeNull();
    expect(metrics!.current.mean_iou).toBeGreaterThan(0);

    // inpaint with the session's dilation setting, then preview both sides
    store.apply({ type: 'dilate', iters: 2 });
    const inpJob = await controller.runInpaint();
    expect(inpJob.state).toBe('done');
    const report = await api.getReport(manifest.scene_id);
    expect(report.provider).toBe('harmonic');

    store.apply({ type: 'preview', t: 0.3 });
    const after = await api.fetchImage(controller.previewUrl());
    expect(after).not.toBe('');
    store.apply({ type: 'toggle-original', value: true });
    const before = await api.fetchImage(controller.previewUrl());
    expect(before).not.toBe('');
    expect(controller.previewUrl()).toContain('kind=original');
  }, 900_000);

  it('point edit round trip against the live service', async () => {
    const sceneId = store.state.sceneId!;
    const baseline = JSON.stringify(await api.getAnnotations(sceneId));
    store.apply({ type: 'add-point', point: { u: 30, v: 31, polarity: 'positive' } });
    await api.putAnnotations(sceneId, store.annotations());
    store.apply({ type: 'delete-point', index: store.state.points.length - 1 });
    await api.putAnnotations(sceneId, store.annotations());
    expect(JSON.stringify(await api.getAnnotations(sceneId))).toBe(baseline);
  });

  it('session restore preserves points and settings', () => {
    const encoded = serializeSession(store);
    const restored = restoreSession(encoded);
    expect(restored.state.points).toEqual(store.state.points);
    expect(restored.state.dilateIters).toBe(store.state.dilateIters);
    expect(restored.state.sceneId).toBe(store.state.sceneId);
  });
});
