/**
 * Application controller: the segment / review / inpaint / preview flows the
 * panels invoke. Everything is a thin orchestration over the REST client plus
 * the session store; panels re-render from store state.
 */

import type { ApiClient, JobSnapshot, Manifest } from './api';
import { pollJob } from './poll';
import type { SessionStore } from './state';

export interface JobDefaults {
  resolution: number;
  iterations: number;
  raysPerBatch: number;
  nSamples: number;
  coarseStages: [number, number][];
}

export const DESK_DEFAULTS: JobDefaults = {
  resolution: 32,
  iterations: 300,
  raysPerBatch: 2048,
  nSamples: 48,
  coarseStages: [
    [4, 150],
    [2, 150],
  ],
};

export class AppController {
  manifest: Manifest | null = null;
  lastMaskJob: JobSnapshot | null = null;
  lastInpaintJob: JobSnapshot | null = null;
  onJobUpdate: (job: JobSnapshot) => void = () => {};

  constructor(
    public api: ApiClient,
    public store: SessionStore,
    public defaults: JobDefaults = DESK_DEFAULTS,
  ) {}

  get jobRunning(): boolean {
    return this.running;
  }

  private running = false;

  async openScene(path: string, sceneId?: string): Promise<Manifest> {
    this.manifest = await this.api.ingestScene(path, sceneId);
    this.store.apply({ type: 'scene', sceneId: this.manifest.scene_id });
    return this.manifest;
  }

  async loadScene(sceneId: string): Promise<Manifest> {
    this.manifest = await this.api.getScene(sceneId);
    this.store.apply({ type: 'scene', sceneId });
    return this.manifest;
  }

  baseConfig(): Record<string, unknown> {
    const d = this.defaults;
    return {
      resolution: d.resolution,
      iterations: d.iterations,
      rays_per_batch: d.raysPerBatch,
      n_samples: d.nSamples,
      coarse_stages: d.coarseStages,
    };
  }

  /** Launch multiview segmentation from the current points. */
  async runSegmentation(stages = 2): Promise<JobSnapshot> {
    const sceneId = this.requireScene();
    this.acquire();
    try {
      await this.api.putAnnotations(sceneId, this.store.annotations());
      const { job_id } = await this.api.startJob(sceneId, 'segment', { ...this.baseConfig(), stages });
      return await this.track(job_id, 'segment', (job) => (this.lastMaskJob = job));
    } finally {
      this.running = false;
    }
  }

  /** Launch inpainting with the session's dilation and provider choices. */
  async runInpaint(): Promise<JobSnapshot> {
    const sceneId = this.requireScene();
    this.acquire();
    try {
      const config = {
        ...this.baseConfig(),
        dilate_iters: this.store.state.dilateIters,
        provider: this.store.state.provider,
      };
      const { job_id } = await this.api.startJob(sceneId, 'inpaint', config);
      return await this.track(job_id, 'inpaint', (job) => (this.lastInpaintJob = job));
    } finally {
      this.running = false;
    }
  }

  private acquire(): void {
    if (this.running) throw new Error('a job is already running');
    this.running = true;
  }

  private async track(jobId: string, kind: string, done: (job: JobSnapshot) => void): Promise<JobSnapshot> {
    this.store.apply({ type: 'job', jobId, kind });
    const job = await pollJob(this.api, jobId, {
      onProgress: (j) => {
        this.store.state.jobProgress = j.progress;
        this.onJobUpdate(j);
      },
    });
    done(job);
    return job;
  }

  /** Mask overlay URLs for the review strip (one per view). */
  maskThumbnails(): string[] {
    const sceneId = this.requireScene();
    const n = this.manifest?.frames.length ?? 0;
    return Array.from({ length: n }, (_, i) => this.api.maskUrl(sceneId, i));
  }

  /** Render URL for the preview slider honoring the before/after toggle. */
  previewUrl(): string {
    const sceneId = this.requireScene();
    const kind = this.store.state.showOriginal ? 'original' : 'inpainted';
    return this.api.renderUrl(sceneId, this.store.state.previewT, kind);
  }

  private requireScene(): string {
    const id = this.store.state.sceneId;
    if (!id) throw new Error('no scene loaded');
    return id;
  }
}
