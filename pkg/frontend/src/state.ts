/**
 * Session state: the single mutable store behind the UI, plus an event log so
 * replaying a session reproduces it. Points live in image coordinates; view
 * transforms never touch them.
 */

import type { Annotations } from './api';

export interface Point {
  u: number;
  v: number;
  polarity: 'positive' | 'negative';
}

export interface SessionState {
  sceneId: string | null;
  sourceView: number;
  points: Point[];
  activeJobId: string | null;
  activeJobKind: string | null;
  jobProgress: number;
  dilateIters: number;
  provider: string;
  previewT: number; // camera-path slider parameter in [0, 1]
  showOriginal: boolean; // before/after toggle
}

export type SessionEvent =
  | { type: 'scene'; sceneId: string }
  | { type: 'source-view'; index: number }
  | { type: 'add-point'; point: Point }
  | { type: 'delete-point'; index: number }
  | { type: 'dilate'; iters: number }
  | { type: 'provider'; id: string }
  | { type: 'job'; jobId: string; kind: string }
  | { type: 'preview'; t: number }
  | { type: 'toggle-original'; value: boolean };

export function initialState(): SessionState {
  return {
    sceneId: null,
    sourceView: 0,
    points: [],
    activeJobId: null,
    activeJobKind: null,
    jobProgress: 0,
    dilateIters: 5,
    provider: 'harmonic',
    previewT: 0.5,
    showOriginal: false,
  };
}

export class SessionStore {
  state: SessionState = initialState();
  readonly events: SessionEvent[] = [];
  private listeners: Array<(s: SessionState) => void> = [];

  subscribe(fn: (s: SessionState) => void): void {
    this.listeners.push(fn);
  }

  apply(event: SessionEvent): void {
    this.events.push(event);
    reduce(this.state, event);
    for (const fn of this.listeners) fn(this.state);
  }

  annotations(): Annotations {
    return {
      source_view: this.state.sourceView,
      positive: this.state.points.filter((p) => p.polarity === 'positive').map((p) => [p.u, p.v]),
      negative: this.state.points.filter((p) => p.polarity === 'negative').map((p) => [p.u, p.v]),
    };
  }
}

function reduce(state: SessionState, event: SessionEvent): void {
  switch (event.type) {
    case 'scene':
      state.sceneId = event.sceneId;
      break;
    case 'source-view':
      state.sourceView = event.index;
      state.points = [];
      break;
    case 'add-point':
      state.points.push({ ...event.point });
      break;
    case 'delete-point':
      state.points.splice(event.index, 1);
      break;
    case 'dilate':
      state.dilateIters = event.iters;
      break;
    case 'provider':
      state.provider = event.id;
      break;
    case 'job':
      state.activeJobId = event.jobId;
      state.activeJobKind = event.kind;
      state.jobProgress = 0;
      break;
    case 'preview':
      state.previewT = event.t;
      break;
    case 'toggle-original':
      state.showOriginal = event.value;
      break;
  }
}

/** Replay an event log into a fresh store; reproduces the session state. */
export function replay(events: SessionEvent[]): SessionStore {
  const store = new SessionStore();
  for (const e of events) store.apply(e);
  return store;
}

/** URL-safe serialization for session restore (hash fragment / storage). */
export function serializeSession(store: SessionStore): string {
  const payload = JSON.stringify({ state: store.state, events: store.events });
  const bytes = new TextEncoder().encode(payload);
  let binary = '';
  for (const b of bytes) binary += String.fromCharCode(b);
  return btoa(binary).replace(/\+/g, '-').replace(/\//g, '_').replace(/=+$/, '');
}

export function restoreSession(encoded: string): SessionStore {
  const b64 = encoded.replace(/-/g, '+').replace(/_/g, '/');
  const binary = atob(b64 + '='.repeat((4 - (b64.length % 4)) % 4));
  const bytes = Uint8Array.from(binary, (c) => c.charCodeAt(0));
  const payload = JSON.parse(new TextDecoder().decode(bytes)) as {
    state: SessionState;
    events: SessionEvent[];
  };
  const store = new SessionStore();
  store.state = payload.state;
  store.events.push(...payload.events);
  return store;
}
