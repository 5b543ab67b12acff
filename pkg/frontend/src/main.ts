/** Entry point: wire the client to the service and mount the app.
 * The service base URL comes from ?api=... and defaults to the page origin,
 * so the built page can be served from anywhere next to the review service. */

import { ApiClient } from "./api.js";
import { ReviewSession } from "./store.js";
import { mount } from "./ui.js";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("api") ?? window.location.origin;

const session = new ReviewSession(new ApiClient(baseUrl));
const root = document.getElementById("app");
if (!root) throw new Error("missing #app element");
mount(root, session);
