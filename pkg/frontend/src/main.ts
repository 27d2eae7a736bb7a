/** Browser bootstrap: wires the workbench state to the static page. */

import { AllocationDesk } from "./allocation.js";
import { ApiClient } from "./api.js";
import { Workbench } from "./state.js";
import { renderResultHtml } from "./view.js";

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) {
    throw new Error(`missing element #${id}`);
  }
  return node as T;
}

function boot(): void {
  const params = new URLSearchParams(window.location.search);
  const base = params.get("api") ?? "http://127.0.0.1:8411";
  const token = params.get("token") ?? "change-me";
  const api = new ApiClient(base, token);
  const workbench = new Workbench(api);
  const desk = new AllocationDesk(api);

  const dslInput = el<HTMLTextAreaElement>("dsl");
  const results = el<HTMLDivElement>("results");
  const status = el<HTMLDivElement>("status");
  const selectionInfo = el<HTMLDivElement>("selection");

  function paint(): void {
    if (workbench.error) {
      results.innerHTML = `<div class="banner error">${workbench.error}</div>`;
    } else if (workbench.view) {
      results.innerHTML = renderResultHtml(workbench.view);
      for (const box of results.querySelectorAll<HTMLInputElement>(".case-select")) {
        box.checked = workbench.selected.includes(box.value);
        box.addEventListener("change", () => {
          if (box.checked) {
            const outcome = workbench.select(box.value);
            if (!outcome.ok) {
              box.checked = false;
              status.textContent = outcome.hint ?? "";
            }
          } else {
            workbench.deselect(box.value);
          }
          selectionInfo.textContent = `selected: ${workbench.selected.join(", ")}`;
        });
      }
    }
    dslInput.value = workbench.dsl;
  }

  el<HTMLButtonElement>("run").addEventListener("click", async () => {
    workbench.setDsl(dslInput.value);
    status.textContent = "running…";
    await workbench.submitDsl();
    status.textContent = "";
    paint();
  });

  el<HTMLButtonElement>("load-ref").addEventListener("click", async () => {
    const pid = el<HTMLInputElement>("ref-patient").value.trim();
    await workbench.loadReference(pid);
    workbench.setControls({
      patientId: pid,
      ageBand: Number(el<HTMLInputElement>("age-band").value || "3"),
      childrenBand: el<HTMLInputElement>("children-band").checked,
      likeImage: null,
    });
    status.textContent = "running…";
    await workbench.submitSimilar();
    status.textContent = "";
    paint();
  });

  el<HTMLInputElement>("age-band").addEventListener("change", async (event) => {
    if (!workbench.controls) {
      return;
    }
    await workbench.setAgeBand(Number((event.target as HTMLInputElement).value));
    paint();
  });

  el<HTMLInputElement>("children-band").addEventListener("change", async (event) => {
    if (!workbench.controls) {
      return;
    }
    await workbench.setChildrenBand((event.target as HTMLInputElement).checked);
    paint();
  });

  el<HTMLButtonElement>("allocate").addEventListener("click", async () => {
    const pid = el<HTMLInputElement>("desk-patient").value.trim();
    const entry = await desk.allocate(pid);
    const counts = desk
      .counts()
      .map(([pair, n]) => `${pair}: ${n}`)
      .join("  ");
    el<HTMLDivElement>("desk-log").innerHTML =
      desk.log
        .map((e) =>
          e.pair
            ? `<div>${e.patientId} → ${e.pair.join(" + ")}</div>`
            : `<div class="error">${e.patientId}: ${e.error}</div>`,
        )
        .join("") + `<div class="counts">${counts}</div>`;
    void entry;
  });
}

window.addEventListener("DOMContentLoaded", boot);
