/** Typed client for the annotation service HTTP API. */

export type ViewMode = "raw" | "mask-overlay" | "distance";

export interface ClassDef {
  id: number;
  name: string;
  hotkey: string;
}

export interface NextResponse {
  done: boolean;
  image?: string;
  id?: number;
  index?: number;
  total?: number;
}

export interface InstanceMeta {
  image: string;
  id: number;
  bbox: { lo: number[]; hi: number[] };
  depth: number;
  shape: number[];
  labeled: number | null;
  features: Record<string, number>;
}

export interface Progress {
  labeled: number;
  total: number;
  per_class: Record<string, number>;
}

async function getJson<T>(url: string): Promise<T> {
  const resp = await fetch(url);
  if (!resp.ok) {
    throw new Error(`GET ${url} failed: ${resp.status}`);
  }
  return (await resp.json()) as T;
}

export class ApiClient {
  constructor(private readonly base: string = "") {}

  classes(): Promise<ClassDef[]> {
    return getJson(`${this.base}/api/classes`);
  }

  next(): Promise<NextResponse> {
    return getJson(`${this.base}/api/next`);
  }

  instance(image: string, id: number): Promise<InstanceMeta> {
    return getJson(`${this.base}/api/instances/${encodeURIComponent(image)}/${id}`);
  }

  progress(): Promise<Progress> {
    return getJson(`${this.base}/api/progress`);
  }

  async label(image: string, id: number, classId: number): Promise<void> {
    const resp = await fetch(
      `${this.base}/api/instances/${encodeURIComponent(image)}/${id}/label`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ class: classId }),
      },
    );
    if (!resp.ok) {
      throw new Error(`label POST failed: ${resp.status}`);
    }
  }

  sliceUrl(image: string, id: number, z: number, mode: ViewMode, sigma?: number): string {
    const params = new URLSearchParams({ mode });
    if (mode === "distance" && sigma !== undefined) {
      params.set("sigma", String(sigma));
    }
    return `${this.base}/api/instances/${encodeURIComponent(image)}/${id}/slice/${z}?${params}`;
  }
}
