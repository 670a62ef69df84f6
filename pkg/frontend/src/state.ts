/** View state and its pure transitions, kept free of DOM concerns. */

import type { ClassDef, InstanceMeta, Progress, ViewMode } from "./api.js";

export const VIEW_MODES: ViewMode[] = ["raw", "mask-overlay", "distance"];

export interface ViewState {
  classes: ClassDef[];
  instance: InstanceMeta | null;
  z: number;
  mode: ViewMode;
  progress: Progress;
  done: boolean;
  busy: boolean;
  error: string | null;
  /** last submitted instance key, for undo */
  previous: { image: string; id: number } | null;
}

export function initialState(): ViewState {
  return {
    classes: [],
    instance: null,
    z: 0,
    mode: "raw",
    progress: { labeled: 0, total: 0, per_class: {} },
    done: false,
    busy: false,
    error: null,
    previous: null,
  };
}

export function middleSlice(depth: number): number {
  return Math.floor(depth / 2);
}

export function clampZ(z: number, depth: number): number {
  return Math.min(Math.max(z, 0), depth - 1);
}

export function scrollZ(state: ViewState, delta: number): number {
  if (!state.instance) {
    return state.z;
  }
  return clampZ(state.z + (delta > 0 ? 1 : -1), state.instance.depth);
}

export function nextMode(mode: ViewMode): ViewMode {
  return VIEW_MODES[(VIEW_MODES.indexOf(mode) + 1) % VIEW_MODES.length];
}

export function classForHotkey(classes: ClassDef[], key: string): ClassDef | null {
  for (const c of classes) {
    if (c.hotkey === key) {
      return c;
    }
  }
  return null;
}
