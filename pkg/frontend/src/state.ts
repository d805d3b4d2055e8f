/* Pure session state for the reader UI. Every transition returns a new
 * Session, so the DOM layer can re-render from scratch and tests can drive
 * the logic without a browser. The queue never exposes arm or study
 * identity; items are opaque montage ids plus grid size. */

export interface QueueItem {
  montage_id: string;
  grid_n: number;
  submitted: boolean;
  cells: number[];
}

export type Status = "idle" | "saving" | "saved" | "error";

export interface Session {
  readerId: string;
  items: QueueItem[];
  index: number;
  selection: ReadonlySet<number>;
  cursor: number;
  status: Status;
  message: string;
}

export type PostAnnotation = (
  readerId: string,
  montageId: string,
  cells: number[],
) => Promise<number[]>;

function withSelection(s: Session, selection: Set<number>): Session {
  return { ...s, selection };
}

export function currentItem(s: Session): QueueItem {
  return s.items[s.index];
}

export function cellLimit(s: Session): number {
  const n = currentItem(s).grid_n;
  return n * n;
}

/** Start a session over a fetched queue; selection restores the stored
 * cells of the first item so a reload picks up where the reader left off. */
export function newSession(readerId: string, items: QueueItem[]): Session {
  if (items.length === 0) {
    throw new Error("queue is empty");
  }
  return {
    readerId,
    items,
    index: 0,
    selection: new Set(items[0].cells),
    cursor: 0,
    status: "idle",
    message: "",
  };
}

/** Jump to another montage; its working selection is whatever the server
 * has stored for it (empty when never submitted). */
export function gotoItem(s: Session, index: number): Session {
  const clamped = Math.min(Math.max(index, 0), s.items.length - 1);
  return {
    ...s,
    index: clamped,
    selection: new Set(s.items[clamped].cells),
    cursor: 0,
    status: "idle",
    message: "",
  };
}

export function nextItem(s: Session): Session {
  return gotoItem(s, s.index + 1);
}

export function prevItem(s: Session): Session {
  return gotoItem(s, s.index - 1);
}

/** Toggle one cell: marking an unmarked cell marks it, and toggling it
 * again restores the previous selection exactly. */
export function toggleCell(s: Session, cell: number): Session {
  if (!Number.isInteger(cell) || cell < 0 || cell >= cellLimit(s)) {
    return s;
  }
  const selection = new Set(s.selection);
  if (selection.has(cell)) {
    selection.delete(cell);
  } else {
    selection.add(cell);
  }
  return { ...withSelection(s, selection), status: "idle", message: "" };
}

export function moveCursor(s: Session, dRow: number, dCol: number): Session {
  const n = currentItem(s).grid_n;
  const row = Math.min(Math.max(Math.floor(s.cursor / n) + dRow, 0), n - 1);
  const col = Math.min(Math.max((s.cursor % n) + dCol, 0), n - 1);
  return { ...s, cursor: row * n + col };
}

export function selectionAsList(s: Session): number[] {
  return [...s.selection].sort((a, b) => a - b);
}

function beginSubmit(s: Session): Session {
  return { ...s, status: "saving", message: "" };
}

/** A successful save replaces the stored cells for the current item with
 * what the server accepted; the working selection is preserved. */
export function applySubmitSuccess(s: Session, stored: number[]): Session {
  const items = s.items.map((item, i) =>
    i === s.index ? { ...item, submitted: true, cells: [...stored] } : item,
  );
  return { ...s, items, status: "saved", message: "saved" };
}

/** A failed save keeps the working selection untouched so the reader can
 * simply retry. */
export function applySubmitFailure(s: Session, message: string): Session {
  return { ...s, status: "error", message };
}

export async function submitCurrent(
  s: Session,
  post: PostAnnotation,
): Promise<Session> {
  const saving = beginSubmit(s);
  try {
    const stored = await post(
      s.readerId,
      currentItem(s).montage_id,
      selectionAsList(s),
    );
    return applySubmitSuccess(saving, stored);
  } catch (err) {
    return applySubmitFailure(saving, err instanceof Error ? err.message : String(err));
  }
}

export function progress(s: Session): { done: number; total: number } {
  return {
    done: s.items.filter((item) => item.submitted).length,
    total: s.items.length,
  };
}
