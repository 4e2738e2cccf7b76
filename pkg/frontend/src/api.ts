/**
 * REST client for the inpainting service. Every pixel the UI shows comes
 * through these endpoints; the client holds no computation of its own.
 */

export interface Intrinsics {
  fx: number;
  fy: number;
  cx: number;
  cy: number;
  w: number;
  h: number;
}

export interface Frame {
  file: string;
  matrix: number[];
}

export interface Manifest {
  scene_id: string;
  intrinsics: Intrinsics;
  frames: Frame[];
}

export interface Annotations {
  source_view: number;
  positive: [number, number][];
  negative: [number, number][];
}

export interface JobSnapshot {
  job_id: string;
  kind: string;
  scene_id: string;
  state: 'queued' | 'running' | 'done' | 'failed';
  progress: number;
  artifacts: Record<string, string>;
  error: string | null;
}

export interface MaskScore {
  mean_iou: number;
  mean_accuracy: number;
}

export interface MaskMetrics {
  current: MaskScore;
  previous: MaskScore | null;
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export class ApiClient {
  constructor(
    private base: string,
    private fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchImpl(this.base + path, {
      headers: { 'Content-Type': 'application/json' },
      ...init,
    });
    if (!res.ok) {
      let detail = res.statusText;
      try {
        detail = JSON.stringify((await res.json()).detail);
      } catch {
        /* non-JSON error body */
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  ingestScene(path: string, sceneId?: string): Promise<Manifest> {
    return this.request<Manifest>('/scenes', {
      method: 'POST',
      body: JSON.stringify({ path, scene_id: sceneId }),
    });
  }

  getScene(sceneId: string): Promise<Manifest> {
    return this.request<Manifest>(`/scenes/${sceneId}`);
  }

  viewUrl(sceneId: string, index: number): string {
    return `${this.base}/scenes/${sceneId}/views/${index}.png`;
  }

  maskUrl(sceneId: string, index: number): string {
    return `${this.base}/scenes/${sceneId}/masks/${index}.png`;
  }

  renderUrl(sceneId: string, interp: number, kind: 'original' | 'inpainted', nSamples = 48): string {
    return `${this.base}/scenes/${sceneId}/renders?interp=${interp.toFixed(4)}&kind=${kind}&n_samples=${nSamples}`;
  }

  putAnnotations(sceneId: string, ann: Annotations): Promise<Annotations> {
    return this.request<Annotations>(`/scenes/${sceneId}/annotations`, {
      method: 'PUT',
      body: JSON.stringify(ann),
    });
  }

  getAnnotations(sceneId: string): Promise<Annotations> {
    return this.request<Annotations>(`/scenes/${sceneId}/annotations`);
  }

  startJob(sceneId: string, kind: string, config: Record<string, unknown>): Promise<{ job_id: string }> {
    return this.request<{ job_id: string }>(`/scenes/${sceneId}/jobs`, {
      method: 'POST',
      body: JSON.stringify({ kind, config }),
    });
  }

  getJob(jobId: string): Promise<JobSnapshot> {
    return this.request<JobSnapshot>(`/jobs/${jobId}`);
  }

  cancelJob(jobId: string): Promise<unknown> {
    return this.request(`/jobs/${jobId}/cancel`, { method: 'POST' });
  }

  getReport(sceneId: string): Promise<Record<string, unknown>> {
    return this.request(`/scenes/${sceneId}/report`);
  }

  /** Mask quality vs bundled ground truth; null when not available. */
  async getMaskMetrics(sceneId: string): Promise<MaskMetrics | null> {
    try {
      return await this.request<MaskMetrics>(`/scenes/${sceneId}/mask_metrics`);
    } catch (err) {
      if (err instanceof ApiError && err.status === 404) return null;
      throw err;
    }
  }

  /** Fetch a PNG endpoint and return a displayable URL (empty on error).
   * Falls back to a data: URL where object URLs are unavailable (jsdom). */
  async fetchImage(url: string): Promise<string> {
    const res = await this.fetchImpl(url);
    if (!res.ok) return '';
    const blob = await res.blob();
    if (typeof URL.createObjectURL === 'function') {
      return URL.createObjectURL(blob);
    }
    const bytes = new Uint8Array(await blob.arrayBuffer());
    let binary = '';
    for (const b of bytes) binary += String.fromCharCode(b);
    return `data:image/png;base64,${btoa(binary)}`;
  }
}
