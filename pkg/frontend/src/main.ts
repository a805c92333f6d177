import { DashboardApp } from "./app.js";

const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app element");
}
const app = new DashboardApp(root);
app.start();
