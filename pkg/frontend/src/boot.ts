/** Browser entry point: mount the app against the same-origin API. */

import { mountApp } from "./app.js";
import { HttpClient } from "./protocol.js";

const root = document.getElementById("app");
if (root) {
  const app = mountApp(root, new HttpClient(""));
  void app.vm.start();
}
