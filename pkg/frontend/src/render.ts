/* DOM rendering: one render(root, session, handlers) call redraws the whole
 * app from state. The montage is an <img> with an absolutely positioned
 * N x N cell overlay; cell borders give the visible gridlines. */

import { montagePngUrl } from "./api.js";
import type { Session } from "./state.js";
import { currentItem, progress, selectionAsList } from "./state.js";

export interface Handlers {
  onToggle: (cell: number) => void;
  onSubmit: () => void;
  onPrev: () => void;
  onNext: () => void;
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

export function render(root: HTMLElement, s: Session, handlers: Handlers): void {
  root.textContent = "";
  const item = currentItem(s);
  const n = item.grid_n;

  const bar = el("div", "topbar");
  const done = progress(s);
  bar.append(
    el("span", "counter", `montage ${s.index + 1} / ${s.items.length}`),
    el("span", "progress", `${done.done} of ${done.total} submitted`),
  );
  root.append(bar);

  const stage = el("div", "stage");
  const img = el("img", "montage");
  img.src = montagePngUrl(item.montage_id);
  img.alt = "patch montage";
  img.draggable = false;
  stage.append(img);

  const grid = el("div", "grid");
  grid.style.gridTemplateColumns = `repeat(${n}, 1fr)`;
  grid.style.gridTemplateRows = `repeat(${n}, 1fr)`;
  for (let cell = 0; cell < n * n; cell++) {
    const button = el("button", "cell");
    if (s.selection.has(cell)) button.classList.add("selected");
    if (s.cursor === cell) button.classList.add("cursor");
    button.setAttribute("aria-label", `cell ${cell}`);
    button.addEventListener("click", () => handlers.onToggle(cell));
    grid.append(button);
  }
  stage.append(grid);
  root.append(stage);

  const controls = el("div", "controls");
  const prev = el("button", "nav", "← previous");
  prev.disabled = s.index === 0;
  prev.addEventListener("click", handlers.onPrev);
  const submit = el(
    "button",
    "submit",
    s.status === "saving" ? "saving…" : "submit marked cells",
  );
  submit.disabled = s.status === "saving";
  submit.addEventListener("click", handlers.onSubmit);
  const next = el("button", "nav", "next →");
  next.disabled = s.index === s.items.length - 1;
  next.addEventListener("click", handlers.onNext);
  controls.append(prev, submit, next);
  root.append(controls);

  const status = el("div", `status status-${s.status}`);
  if (s.status === "error") {
    status.textContent = `save failed: ${s.message} - your selection is kept, retry submit`;
  } else if (s.status === "saved") {
    status.textContent = `saved ${selectionAsList(s).length} marked cells`;
  } else if (item.submitted) {
    status.textContent = "already submitted - submitting again replaces it";
  } else {
    status.textContent =
      "click cells (or arrows + space) to mark suspicious patches";
  }
  root.append(status);

  const help = el("div", "help");
  help.textContent =
    "keys: arrows move, space toggles, enter submits, n/p change montage";
  root.append(help);
}
