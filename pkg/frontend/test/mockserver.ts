/** In-memory stand-in for the annotation service, faithful to its API
 * contract: ascending (image, id) order, last-record-wins store, and
 * /api/next skipping labeled instances. */

import type { ClassDef } from "../src/api.js";

export interface StoreRecord {
  key: string;
  class: number;
}

export class MockServer {
  readonly records: StoreRecord[] = [];
  readonly active = new Map<string, number>();
  failNextLabel = false;

  constructor(
    readonly classes: ClassDef[],
    readonly catalog: Array<{ image: string; id: number; depth: number }>,
  ) {}

  private nextUnlabeled() {
    for (const entry of this.catalog) {
      if (!this.active.has(`${entry.image}/${entry.id}`)) {
        return entry;
      }
    }
    return null;
  }

  /** fetch() replacement covering the endpoints the UI uses. */
  fetch = async (url: string, init?: RequestInit): Promise<Response> => {
    const path = url.split("?")[0];
    if (path === "/api/classes") {
      return json(this.classes);
    }
    if (path === "/api/next") {
      const next = this.nextUnlabeled();
      if (!next) {
        return json({ done: true });
      }
      return json({ done: false, image: next.image, id: next.id });
    }
    if (path === "/api/progress") {
      const perClass: Record<string, number> = {};
      for (const cls of this.active.values()) {
        perClass[String(cls)] = (perClass[String(cls)] ?? 0) + 1;
      }
      return json({
        labeled: this.active.size,
        total: this.catalog.length,
        per_class: perClass,
      });
    }
    const label = path.match(/^\/api\/instances\/([^/]+)\/(\d+)\/label$/);
    if (label && init?.method === "POST") {
      if (this.failNextLabel) {
        this.failNextLabel = false;
        return new Response("boom", { status: 500 });
      }
      const body = JSON.parse(String(init.body)) as { class: number };
      if (!this.classes.some((c) => c.id === body.class)) {
        return new Response("unknown class", { status: 422 });
      }
      const key = `${decodeURIComponent(label[1])}/${label[2]}`;
      this.records.push({ key, class: body.class });
      this.active.set(key, body.class);
      return json({ ok: true });
    }
    const meta = path.match(/^\/api\/instances\/([^/]+)\/(\d+)$/);
    if (meta) {
      const image = decodeURIComponent(meta[1]);
      const id = Number(meta[2]);
      const entry = this.catalog.find((e) => e.image === image && e.id === id);
      if (!entry) {
        return new Response("not found", { status: 404 });
      }
      return json({
        image,
        id,
        bbox: { lo: [0, 0, 0], hi: [entry.depth, 8, 8] },
        depth: entry.depth,
        shape: [entry.depth, 8, 8],
        labeled: this.active.get(`${image}/${id}`) ?? null,
        features: { volume: 64, sphericity: 0.8 },
      });
    }
    if (/\/slice\/\d+$/.test(path)) {
      return new Response(new Blob(["png"]), { status: 200 });
    }
    return new Response("not found", { status: 404 });
  };
}

function json(obj: unknown): Response {
  return new Response(JSON.stringify(obj), {
    status: 200,
    headers: { "Content-Type": "application/json" },
  });
}
