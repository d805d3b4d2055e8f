/* Thin JSON client for the reader-study service. All knowledge of URLs
 * lives here; everything else works with plain data. */

import type { QueueItem } from "./state.js";

async function asJson<T>(resp: Response): Promise<T> {
  if (!resp.ok) {
    let detail = `${resp.status}`;
    try {
      const body = (await resp.json()) as { detail?: string };
      if (body.detail) detail = body.detail;
    } catch {
      /* non-JSON error body; keep the status code */
    }
    throw new Error(detail);
  }
  return (await resp.json()) as T;
}

export async function fetchQueue(readerId: string): Promise<QueueItem[]> {
  const resp = await fetch(`/api/queue/${encodeURIComponent(readerId)}`);
  const payload = await asJson<{ items: QueueItem[] }>(resp);
  return payload.items;
}

export async function postAnnotation(
  readerId: string,
  montageId: string,
  cells: number[],
): Promise<number[]> {
  const resp = await fetch("/api/annotations", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ reader_id: readerId, montage_id: montageId, cells }),
  });
  const record = await asJson<{ cells: number[] }>(resp);
  return record.cells;
}

export function montagePngUrl(montageId: string): string {
  return `/api/montage/${encodeURIComponent(montageId)}`;
}
