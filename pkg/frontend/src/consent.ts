/**
 * Light enhancement of the provider's sign-in/consent form. The form
 * itself (and who it names as the requester) is server-rendered; the
 * console never moves credentials anywhere except this same form's
 * own submit action.
 */

export function initConsentForm(form: HTMLFormElement): void {
  const username = form.querySelector<HTMLInputElement>('input[name="username"]');
  const password = form.querySelector<HTMLInputElement>('input[name="password"]');
  const grant = form.querySelector<HTMLButtonElement>('button[value="grant"]');
  if (!username || !password || !grant) return;

  const refresh = () => {
    grant.disabled = username.value.trim() === "" || password.value === "";
  };
  username.addEventListener("input", refresh);
  password.addEventListener("input", refresh);
  refresh();
  username.focus();
}

declare const document: Document | undefined;
if (typeof document !== "undefined") {
  const form = document.querySelector<HTMLFormElement>("form#login");
  if (form) initConsentForm(form);
}
