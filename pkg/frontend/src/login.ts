/**
 * Sign-in page controls: single-provider buttons, the multi-provider
 * picker with a threshold, and submit gating. The console holds no
 * protocol state; submitting is a plain navigation and every redirect
 * after that is server-driven.
 */

import {
  Mode,
  Selection,
  canSubmit,
  clampThreshold,
  defaultThreshold,
  loginStartUrl,
  singleLoginUrl,
  validationMessage,
} from "./selection.js";

export function initLoginConsole(root: HTMLElement, navigate: (url: string) => void): void {
  const idps = (root.dataset.idps || "").split(",").map((s) => s.trim()).filter(Boolean);
  if (root.dataset.baseline === "1" || idps.length === 0) {
    const button = root.ownerDocument.createElement("button");
    button.textContent = "Sign in";
    button.addEventListener("click", () => navigate("/login/start"));
    root.replaceChildren(button);
    return;
  }

  const doc = root.ownerDocument;
  let mode: Mode = "signin";

  const quick = doc.createElement("div");
  quick.className = "quick-login";
  for (const idp of idps) {
    const button = doc.createElement("button");
    button.type = "button";
    button.className = "idp-button";
    button.dataset.idp = idp;
    button.textContent = `Sign in with ${idp}`;
    button.addEventListener("click", () => navigate(singleLoginUrl(idp)));
    quick.appendChild(button);
  }

  const picker = doc.createElement("fieldset");
  picker.className = "idp-picker";
  const legend = doc.createElement("legend");
  legend.textContent = "Use several providers";
  picker.appendChild(legend);

  const modeRow = doc.createElement("div");
  for (const value of ["signin", "signup"] as Mode[]) {
    const label = doc.createElement("label");
    const radio = doc.createElement("input");
    radio.type = "radio";
    radio.name = "mode";
    radio.value = value;
    radio.checked = value === mode;
    radio.addEventListener("change", () => {
      mode = value;
      refresh();
    });
    label.appendChild(radio);
    label.append(value === "signup" ? " sign up (new account)" : " sign in");
    modeRow.appendChild(label);
  }
  picker.appendChild(modeRow);

  const boxes: HTMLInputElement[] = [];
  for (const idp of idps) {
    const label = doc.createElement("label");
    const box = doc.createElement("input");
    box.type = "checkbox";
    box.name = "idp";
    box.value = idp;
    box.addEventListener("change", refresh);
    boxes.push(box);
    label.appendChild(box);
    label.append(` ${idp}`);
    picker.appendChild(label);
  }

  const thresholdLabel = doc.createElement("label");
  thresholdLabel.append("Threshold m ");
  const threshold = doc.createElement("input");
  threshold.type = "number";
  threshold.name = "m";
  threshold.min = "1";
  threshold.value = String(defaultThreshold(idps.length));
  threshold.addEventListener("input", refresh);
  thresholdLabel.appendChild(threshold);
  picker.appendChild(thresholdLabel);

  const message = doc.createElement("p");
  message.className = "validation";

  const submit = doc.createElement("button");
  submit.type = "button";
  submit.id = "multi-submit";
  submit.addEventListener("click", () => {
    const sel = current();
    if (canSubmit(sel)) navigate(loginStartUrl(sel));
  });
  picker.appendChild(submit);
  picker.appendChild(message);

  function current(): Selection {
    return {
      mode,
      idps: boxes.filter((b) => b.checked).map((b) => b.value),
      m: clampThreshold(Number(threshold.value), idps.length),
    };
  }

  function refresh(): void {
    const sel = current();
    threshold.value = String(sel.m);
    submit.textContent = sel.mode === "signup"
      ? `Sign up with ${sel.idps.length || "..."} providers`
      : "Sign in with selected providers";
    submit.disabled = !canSubmit(sel);
    message.textContent = canSubmit(sel) ? "" : validationMessage(sel);
  }

  refresh();
  root.replaceChildren(quick, picker);
}

declare const document: Document | undefined;
if (typeof document !== "undefined") {
  const root = document.getElementById("login-root");
  if (root) {
    initLoginConsole(root, (url) => window.location.assign(url));
  }
}
