/**
 * Mock-server mode: an in-memory fetch implementation of the REST surface so
 * the UI can be developed without the Python service (append ?mock=1).
 * Jobs complete after a few polls; images are tiny generated PNGs.
 */

import type { Annotations, FetchLike } from './api';

// 1x1 gray PNG
const TINY_PNG = Uint8Array.from(
  atob('iVBORw0KGgoAAAANSUhEUgAAAAEAAAABCAYAAAAfFcSJAAAADUlEQVR42mNsaGj4DwAFhAKAkNVXvgAAAABJRU5ErkJggg=='),
  (c) => c.charCodeAt(0),
);

interface MockJob {
  job_id: string;
  kind: string;
  scene_id: string;
  polls: number;
  state: string;
}

export function createMockFetch(nViews = 8, pollsToFinish = 3): FetchLike {
  const jobs = new Map<string, MockJob>();
  let annotations: Annotations | null = null;
  let counter = 0;

  const manifest = {
    scene_id: 'mock-scene',
    intrinsics: { fx: 60, fy: 60, cx: 32, cy: 32, w: 64, h: 64 },
    frames: Array.from({ length: nViews }, (_, i) => ({
      file: `images/${String(i).padStart(3, '0')}.png`,
      matrix: [1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1],
    })),
  };

  const json = (body: unknown, status = 200) =>
    new Response(JSON.stringify(body), { status, headers: { 'Content-Type': 'application/json' } });
  const png = () => new Response(TINY_PNG.slice().buffer as ArrayBuffer, { status: 200, headers: { 'Content-Type': 'image/png' } });

  return async (input: string, init?: RequestInit): Promise<Response> => {
    const url = new URL(input, 'http://mock');
    const path = url.pathname;
    const method = (init?.method ?? 'GET').toUpperCase();

    if (method === 'POST' && path === '/scenes') return json(manifest);
    if (method === 'GET' && /^\/scenes\/[^/]+$/.test(path)) return json(manifest);
    if (method === 'PUT' && path.endsWith('/annotations')) {
      annotations = JSON.parse(String(init?.body)) as Annotations;
      return json(annotations);
    }
    if (method === 'GET' && path.endsWith('/annotations')) {
      return annotations ? json(annotations) : json({ detail: 'annotations' }, 404);
    }
    if (method === 'POST' && path.endsWith('/jobs')) {
      const body = JSON.parse(String(init?.body)) as { kind: string; config: Record<string, unknown> };
      if (typeof body.config.lambda_depth === 'number' && body.config.lambda_depth < 0) {
        return json({ detail: 'lambda_depth must be >= 0' }, 422);
      }
      const job: MockJob = { job_id: `mock-${counter++}`, kind: body.kind, scene_id: 'mock-scene', polls: 0, state: 'running' };
      jobs.set(job.job_id, job);
      return json({ job_id: job.job_id });
    }
    const jobMatch = path.match(/^\/jobs\/([^/]+)$/);
    if (method === 'GET' && jobMatch) {
      const job = jobs.get(jobMatch[1]);
      if (!job) return json({ detail: 'job' }, 404);
      job.polls += 1;
      if (job.polls >= pollsToFinish) job.state = 'done';
      return json({
        job_id: job.job_id,
        kind: job.kind,
        scene_id: job.scene_id,
        state: job.state,
        progress: Math.min(1, job.polls / pollsToFinish),
        artifacts: {},
        error: null,
      });
    }
    if (method === 'POST' && path.endsWith('/cancel')) return json({ cancelled: true });
    if (path.endsWith('.png') || path.includes('/renders')) return png();
    if (path.endsWith('/report')) return json({ provider: 'harmonic', masked_pixels: 123 });
    return json({ detail: `no mock for ${method} ${path}` }, 404);
  };
}
