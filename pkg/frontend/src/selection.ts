/**
 * Provider-selection rules for the sign-in page.
 *
 * Sign-up fixes the enrolled set: every chosen provider is part of the
 * new identity and the threshold m is sent to the server. Sign-in only
 * needs any m of the enrolled providers; the threshold stays client-side
 * (the server matches against the enrolled record's own threshold).
 */

export type Mode = "signup" | "signin";

export interface Selection {
  mode: Mode;
  idps: string[];
  m: number;
}

export function clampThreshold(m: number, count: number): number {
  if (!Number.isFinite(m)) return 1;
  return Math.max(1, Math.min(Math.trunc(m), Math.max(count, 1)));
}

/** Default threshold for a fresh sign-up selection: n-1, floored at 1. */
export function defaultThreshold(count: number): number {
  return Math.max(1, count - 1);
}

export function canSubmit(sel: Selection): boolean {
  if (sel.idps.length === 0) return false;
  if (sel.m < 1) return false;
  // both at sign-up (m of the new set) and sign-in (m of the enrolled
  // set) the user must have picked at least m providers
  return sel.idps.length >= sel.m;
}

export function validationMessage(sel: Selection): string {
  if (sel.idps.length === 0) return "Pick at least one identity provider.";
  if (sel.idps.length < sel.m) {
    return `Pick at least ${sel.m} providers (or lower the threshold).`;
  }
  return "";
}

/**
 * The navigation target that starts the flow. Protocol state (client id,
 * state nonce, redirect URI) is the server's business; the console only
 * forwards the provider selection.
 */
export function loginStartUrl(sel: Selection): string {
  const params = new URLSearchParams();
  params.set("idp_list", [...sel.idps].sort().join(","));
  if (sel.mode === "signup") {
    params.set("m", String(sel.m));
  }
  return `/login/start?${params.toString()}`;
}

export function singleLoginUrl(idp: string): string {
  const params = new URLSearchParams();
  params.set("idp_list", idp);
  return `/login/start?${params.toString()}`;
}
