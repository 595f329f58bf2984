/**
 * Disclosure preferences page, served by the mixer under /ui/. Uses the
 * mixer's policy endpoints with the session cookie set during the last
 * completed login; without one the page explains how to get there.
 */

interface PolicyState {
  allowed_attributes: string[];
  available: string[];
}

export async function loadPolicy(fetcher: typeof fetch): Promise<PolicyState | null> {
  const resp = await fetcher("/policy", {credentials: "same-origin"});
  if (!resp.ok) return null;
  return (await resp.json()) as PolicyState;
}

export async function savePolicy(fetcher: typeof fetch, names: string[]): Promise<string[] | null> {
  const body = new URLSearchParams({attributes: names.join(",")});
  const resp = await fetcher("/policy", {
    method: "POST",
    credentials: "same-origin",
    headers: {"Content-Type": "application/x-www-form-urlencoded"},
    body: body.toString(),
  });
  if (!resp.ok) return null;
  return ((await resp.json()) as {allowed_attributes: string[]}).allowed_attributes;
}

export async function initPrefsPage(root: HTMLElement, fetcher: typeof fetch): Promise<void> {
  const doc = root.ownerDocument;
  const state = await loadPolicy(fetcher);
  if (state === null) {
    const p = doc.createElement("p");
    p.className = "error";
    p.textContent =
      "No active session. Complete a sign-in first, then come back here " +
      "to choose what gets shared.";
    root.replaceChildren(p);
    return;
  }

  const intro = doc.createElement("p");
  intro.textContent =
    "Nothing is shared with applications unless you tick it here.";
  const list = doc.createElement("div");
  const boxes: HTMLInputElement[] = [];
  for (const name of state.available) {
    const label = doc.createElement("label");
    const box = doc.createElement("input");
    box.type = "checkbox";
    box.value = name;
    box.checked = state.allowed_attributes.includes(name);
    boxes.push(box);
    label.appendChild(box);
    label.append(` ${name}`);
    list.appendChild(label);
  }
  const save = doc.createElement("button");
  save.textContent = "Save preferences";
  const status = doc.createElement("p");
  save.addEventListener("click", async () => {
    const chosen = boxes.filter((b) => b.checked).map((b) => b.value);
    const saved = await savePolicy(fetcher, chosen);
    status.textContent = saved === null
      ? "Saving failed; your session may have expired."
      : saved.length
        ? `Sharing: ${saved.join(", ")}`
        : "Sharing nothing.";
  });
  root.replaceChildren(intro, list, save, status);
}

declare const document: Document | undefined;
if (typeof document !== "undefined") {
  const root = document.getElementById("prefs-root");
  if (root) void initPrefsPage(root, fetch.bind(globalThis));
}
