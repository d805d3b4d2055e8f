/* Boot and event wiring. The reader id persists in localStorage so a page
 * reload rebuilds the session from the server's queue (which carries every
 * stored annotation back to us). */

import { fetchQueue, postAnnotation } from "./api.js";
import { render } from "./render.js";
import type { Session } from "./state.js";
import {
  moveCursor,
  newSession,
  nextItem,
  prevItem,
  submitCurrent,
  toggleCell,
} from "./state.js";

const READER_KEY = "reader-ui:reader-id";

function appRoot(): HTMLElement {
  const root = document.getElementById("app");
  if (!root) throw new Error("missing #app element");
  return root;
}

function renderLogin(onStart: (readerId: string) => void): void {
  const root = appRoot();
  root.textContent = "";
  const box = document.createElement("div");
  box.className = "login";
  const title = document.createElement("h1");
  title.textContent = "Reader study";
  const label = document.createElement("label");
  label.textContent = "reader id";
  label.htmlFor = "reader-id";
  const input = document.createElement("input");
  input.id = "reader-id";
  input.placeholder = "e.g. reader-03";
  input.pattern = "[A-Za-z0-9_-]{1,64}";
  const button = document.createElement("button");
  button.textContent = "start";
  const start = () => {
    const value = input.value.trim();
    if (/^[A-Za-z0-9_-]{1,64}$/.test(value)) onStart(value);
  };
  button.addEventListener("click", start);
  input.addEventListener("keydown", (ev) => {
    if (ev.key === "Enter") start();
  });
  box.append(title, label, input, button);
  root.append(box);
  input.focus();
}

async function startSession(readerId: string): Promise<void> {
  localStorage.setItem(READER_KEY, readerId);
  let session: Session;
  try {
    session = newSession(readerId, await fetchQueue(readerId));
  } catch (err) {
    const root = appRoot();
    root.textContent = `could not load queue: ${err instanceof Error ? err.message : err}`;
    return;
  }

  const update = (next: Session) => {
    session = next;
    draw();
  };

  const submit = () => {
    void submitCurrent(session, postAnnotation).then(update);
  };

  const handlers = {
    onToggle: (cell: number) => update(toggleCell(session, cell)),
    onSubmit: submit,
    onPrev: () => update(prevItem(session)),
    onNext: () => update(nextItem(session)),
  };

  const draw = () => render(appRoot(), session, handlers);

  document.addEventListener("keydown", (ev) => {
    if (ev.target instanceof HTMLInputElement) return;
    switch (ev.key) {
      case "ArrowUp":
        update(moveCursor(session, -1, 0));
        break;
      case "ArrowDown":
        update(moveCursor(session, 1, 0));
        break;
      case "ArrowLeft":
        update(moveCursor(session, 0, -1));
        break;
      case "ArrowRight":
        update(moveCursor(session, 0, 1));
        break;
      case " ":
        ev.preventDefault();
        update(toggleCell(session, session.cursor));
        break;
      case "Enter":
        submit();
        break;
      case "n":
        update(nextItem(session));
        break;
      case "p":
        update(prevItem(session));
        break;
    }
  });

  draw();
}

const remembered = localStorage.getItem(READER_KEY);
if (remembered) {
  void startSession(remembered);
} else {
  renderLogin((readerId) => void startSession(readerId));
}
