import { ApiClient } from "./api.js";
import { AdminView } from "./admin.js";
import { ChatView } from "./chat.js";

const API_BASE = (window as unknown as { API_BASE?: string }).API_BASE ?? "";

function route(): void {
  const root = document.getElementById("app");
  if (!root) return;
  const api = new ApiClient(API_BASE);
  if (location.hash === "#admin") {
    const view = new AdminView(root, api);
    view.mount();
  } else {
    const view = new ChatView(root, api);
    void view.mount();
  }
}

window.addEventListener("hashchange", route);
route();
