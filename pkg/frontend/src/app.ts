/** DOM application: presents one instance at a time, accepts class
 * decisions via buttons or hotkeys, and advances automatically. The
 * server owns all annotation state; refreshing the page resumes at the
 * first unlabeled instance. */

import { ApiClient, type ViewMode } from "./api.js";
import {
  classForHotkey,
  initialState,
  middleSlice,
  nextMode,
  scrollZ,
  type ViewState,
} from "./state.js";

const DISTANCE_SIGMA = 2.0;

export class AnnotationApp {
  readonly state: ViewState = initialState();
  private readonly root: HTMLElement;
  private readonly api: ApiClient;

  constructor(root: HTMLElement, api: ApiClient) {
    this.root = root;
    this.api = api;
    this.onKeyDown = this.onKeyDown.bind(this);
    document.addEventListener("keydown", this.onKeyDown);
  }

  dispose(): void {
    document.removeEventListener("keydown", this.onKeyDown);
  }

  async start(): Promise<void> {
    try {
      this.state.classes = await this.api.classes();
      await this.presentNext();
    } catch (e) {
      this.state.error = `service unreachable: ${e}`;
      this.render();
    }
  }

  /** Fetch and display the next unlabeled instance (or the completion
   * screen), starting at the middle z-slice. */
  async presentNext(): Promise<void> {
    try {
      this.state.progress = await this.api.progress();
      const next = await this.api.next();
      if (next.done) {
        this.state.done = true;
        this.state.instance = null;
      } else {
        this.state.done = false;
        this.state.instance = await this.api.instance(next.image!, next.id!);
        this.state.z = middleSlice(this.state.instance.depth);
      }
      this.state.error = null;
    } catch (e) {
      this.state.error = `lost connection, retrying on next action: ${e}`;
    }
    this.render();
  }

  /** POST the class decision; advance on success, stay (with a toast) on
   * failure. The transition starts immediately and rolls back if the
   * write is rejected. */
  async submitLabel(classId: number): Promise<void> {
    const inst = this.state.instance;
    if (!inst || this.state.busy) {
      return;
    }
    this.state.busy = true;
    this.render();
    try {
      await this.api.label(inst.image, inst.id, classId);
      this.state.previous = { image: inst.image, id: inst.id };
      this.state.busy = false;
      await this.presentNext();
    } catch (e) {
      this.state.busy = false;
      this.state.error = `label not saved: ${e}`;
      this.render(); // rollback: same instance stays on screen
    }
  }

  /** Re-present the last submitted instance so the operator can relabel
   * it; the store keeps full history and the newest record wins. */
  async undo(): Promise<void> {
    const prev = this.state.previous;
    if (!prev) {
      return;
    }
    try {
      this.state.instance = await this.api.instance(prev.image, prev.id);
      this.state.z = middleSlice(this.state.instance.depth);
      this.state.done = false;
      this.state.previous = null;
      this.state.error = null;
    } catch (e) {
      this.state.error = `cannot reload ${prev.image}/${prev.id}: ${e}`;
    }
    this.render();
  }

  onKeyDown(event: KeyboardEvent): void {
    if (event.key === "Backspace") {
      event.preventDefault();
      void this.undo();
      return;
    }
    if (event.key === "m") {
      this.setMode(nextMode(this.state.mode));
      return;
    }
    const cls = classForHotkey(this.state.classes, event.key);
    if (cls) {
      void this.submitLabel(cls.id);
    }
  }

  onWheel(event: WheelEvent): void {
    event.preventDefault();
    this.setZ(scrollZ(this.state, event.deltaY));
  }

  setZ(z: number): void {
    if (this.state.z !== z) {
      this.state.z = z;
      this.render();
    }
  }

  setMode(mode: ViewMode): void {
    this.state.mode = mode;
    this.render();
  }

  private sliceUrl(): string {
    const inst = this.state.instance!;
    return this.api.sliceUrl(inst.image, inst.id, this.state.z, this.state.mode,
                             DISTANCE_SIGMA);
  }

  render(): void {
    const s = this.state;
    this.root.textContent = "";
    const container = el("div", "annotator");

    if (s.error) {
      const toast = el("div", "toast error");
      toast.textContent = s.error;
      container.appendChild(toast);
    }

    container.appendChild(this.renderProgress());

    if (s.done) {
      container.appendChild(this.renderCompletion());
    } else if (s.instance) {
      container.appendChild(this.renderViewer());
      container.appendChild(this.renderClassButtons());
    } else {
      const loading = el("div", "loading");
      loading.textContent = "loading…";
      container.appendChild(loading);
    }
    this.root.appendChild(container);
  }

  private renderProgress(): HTMLElement {
    const s = this.state;
    const wrap = el("div", "progress");
    const bar = el("div", "progress-bar");
    const fill = el("div", "progress-fill");
    const frac = s.progress.total ? s.progress.labeled / s.progress.total : 0;
    fill.style.width = `${Math.round(frac * 100)}%`;
    bar.appendChild(fill);
    const text = el("span", "progress-text");
    text.textContent = `${s.progress.labeled} / ${s.progress.total} labeled`;
    wrap.appendChild(bar);
    wrap.appendChild(text);
    return wrap;
  }

  private renderCompletion(): HTMLElement {
    const s = this.state;
    const box = el("div", "completion");
    const h = el("h2");
    h.textContent = "All instances labeled";
    box.appendChild(h);
    const list = el("ul", "per-class");
    for (const c of s.classes) {
      const item = el("li");
      item.textContent = `${c.name}: ${s.progress.per_class[String(c.id)] ?? 0}`;
      list.appendChild(item);
    }
    box.appendChild(list);
    return box;
  }

  private renderViewer(): HTMLElement {
    const s = this.state;
    const inst = s.instance!;
    const viewer = el("div", "viewer");

    const title = el("div", "instance-title");
    title.textContent = `${inst.image} / ${inst.id}`;
    viewer.appendChild(title);

    const img = el("img", "slice") as HTMLImageElement;
    img.src = this.sliceUrl();
    img.alt = `slice ${s.z} of ${inst.image}/${inst.id}`;
    img.draggable = false;
    img.addEventListener("wheel", (e) => this.onWheel(e), { passive: false });
    viewer.appendChild(img);

    const zbar = el("div", "z-indicator");
    zbar.textContent = `z ${s.z + 1} / ${inst.depth}`;
    viewer.appendChild(zbar);

    const modes = el("div", "modes");
    for (const mode of ["raw", "mask-overlay", "distance"] as ViewMode[]) {
      const b = el("button", mode === s.mode ? "mode active" : "mode");
      b.textContent = mode;
      b.addEventListener("click", () => this.setMode(mode));
      modes.appendChild(b);
    }
    viewer.appendChild(modes);

    const feats = el("div", "features");
    feats.textContent = Object.entries(inst.features)
      .map(([k, v]) => `${k}: ${typeof v === "number" ? +v.toFixed(3) : v}`)
      .join("  ");
    viewer.appendChild(feats);
    return viewer;
  }

  private renderClassButtons(): HTMLElement {
    const s = this.state;
    const bar = el("div", "classes");
    for (const c of s.classes) {
      const b = button("class-button");
      b.dataset.classId = String(c.id);
      b.textContent = `${c.name} [${c.hotkey}]`;
      b.disabled = s.busy;
      b.addEventListener("click", () => void this.submitLabel(c.id));
      bar.appendChild(b);
    }
    const undo = button("undo-button");
    undo.textContent = "undo [Backspace]";
    undo.disabled = !s.previous;
    undo.addEventListener("click", () => void this.undo());
    bar.appendChild(undo);
    return bar;
  }
}

function el(tag: string, className?: string): HTMLElement {
  const node = document.createElement(tag);
  if (className) {
    node.className = className;
  }
  return node;
}

function button(className: string): HTMLButtonElement {
  const node = document.createElement("button");
  node.className = className;
  return node;
}
