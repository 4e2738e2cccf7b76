/**
 * Poll a job until it reaches a terminal state, with growing intervals.
 * Resolves with the final snapshot; failed jobs reject.
 */

import type { ApiClient, JobSnapshot } from './api';

export interface PollOptions {
  initialMs?: number;
  maxMs?: number;
  growth?: number;
  onProgress?: (job: JobSnapshot) => void;
  timeoutMs?: number;
}

export async function pollJob(api: ApiClient, jobId: string, opts: PollOptions = {}): Promise<JobSnapshot> {
  const initial = opts.initialMs ?? 250;
  const max = opts.maxMs ?? 2000;
  const growth = opts.growth ?? 1.5;
  const deadline = Date.now() + (opts.timeoutMs ?? 30 * 60 * 1000);
  let interval = initial;
  for (;;) {
    const job = await api.getJob(jobId);
    opts.onProgress?.(job);
    if (job.state === 'done') return job;
    if (job.state === 'failed') throw new Error(job.error ?? 'job failed');
    if (Date.now() > deadline) throw new Error(`job ${jobId} timed out`);
    await new Promise((resolve) => setTimeout(resolve, interval));
    interval = Math.min(max, interval * growth);
  }
}
