import { describe, expect, it } from "vitest";

import { ApiError } from "../src/api.js";
import { CorrectionQueue } from "../src/queue.js";
import type { CorrectionRequest, CorrectionResponse } from "../src/types.js";

const REQ: CorrectionRequest = {
  x: 10,
  y: 20,
  asserted_label: "benign",
  expert_id: "e0",
  session: "sess",
};

function response(version: number): CorrectionResponse {
  return {
    spot_id: "s0",
    patient_id: "p0",
    predicted_label: "cancerous",
    margin_before: 0.1,
    margin_after: 0.3,
    forest_version: version,
  };
}

describe("correction queue", () => {
  it("sends immediately when online and reports the response", async () => {
    const sent: CorrectionRequest[] = [];
    const q = new CorrectionQueue(async (_spot, req) => {
      sent.push(req);
      return response(sent.length);
    });
    const applied: number[] = [];
    q.onApplied = (e) => applied.push(e.response!.forest_version);
    q.submit("s0", REQ);
    q.submit("s0", { ...REQ, x: 11 });
    await q.whenIdle();
    expect(sent.map((r) => r.x)).toEqual([10, 11]); // strict FIFO
    expect(applied).toEqual([1, 2]);
    expect(q.pendingCount).toBe(0);
    expect(q.offline).toBe(false);
  });

  it("keeps entries pending with a badge while offline, flushes on reconnect", async () => {
    let online = false;
    let calls = 0;
    const q = new CorrectionQueue(async () => {
      calls += 1;
      if (!online) throw new TypeError("fetch failed");
      return response(calls);
    });
    q.submit("s0", REQ);
    await q.whenIdle();
    expect(q.offline).toBe(true);
    expect(q.pendingCount).toBe(1); // visible "pending" badge
    expect(q.entries[0].status).toBe("pending");

    // Further submissions pile up without hammering the network.
    q.submit("s0", { ...REQ, x: 11 });
    await q.whenIdle();
    expect(q.pendingCount).toBe(2);
    expect(calls).toBe(1);

    online = true;
    await q.flush();
    expect(q.pendingCount).toBe(0);
    expect(q.entries.every((e) => e.status === "done")).toBe(true);
    expect(q.entries.map((e) => e.response!.forest_version)).toEqual([2, 3]);
  });

  it("409 parks the entry and asks for a session refresh", async () => {
    const q = new CorrectionQueue(async () => {
      throw new ApiError(409, "corrections are bound to session 'other'");
    });
    q.submit("s0", REQ);
    q.submit("s0", { ...REQ, x: 11 });
    await q.whenIdle();
    expect(q.needsSessionRefresh).toBe(true);
    expect(q.entries[0].status).toBe("conflict");
    // The rest of the queue holds until the user refreshes.
    expect(q.entries[1].status).toBe("pending");
  });

  it("non-409 API errors fail the entry without stopping the queue", async () => {
    let calls = 0;
    const q = new CorrectionQueue(async () => {
      calls += 1;
      if (calls === 1) throw new ApiError(422, "position outside the image");
      return response(calls);
    });
    q.submit("s0", REQ);
    q.submit("s0", { ...REQ, x: 11 });
    await q.whenIdle();
    expect(q.entries[0].status).toBe("failed");
    expect(q.entries[0].error).toMatch(/outside the image/);
    expect(q.entries[1].status).toBe("done");
  });
});
