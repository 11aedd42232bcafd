/* Correction submission queue.
 *
 * Corrections are applied optimistically in the UI and sent strictly in
 * order, one in flight at a time (the server serializes the learner per
 * session anyway). A network failure keeps the entry queued and flags
 * the queue offline; flush() retries on reconnect. A 409 means another
 * session owns the learner: the entry is parked and the app is told to
 * prompt for a session refresh.
 */

import { ApiError } from "./api.js";
import type { CorrectionRequest, CorrectionResponse } from "./types.js";

export type EntryStatus = "pending" | "inflight" | "done" | "conflict" | "failed";

export type QueueEntry = {
  id: number;
  spotId: string;
  request: CorrectionRequest;
  status: EntryStatus;
  response?: CorrectionResponse;
  error?: string;
};

export type Sender = (
  spotId: string,
  req: CorrectionRequest,
) => Promise<CorrectionResponse>;

export class CorrectionQueue {
  entries: QueueEntry[] = [];
  offline = false;
  needsSessionRefresh = false;
  onChange: (() => void) | null = null;
  onApplied: ((entry: QueueEntry) => void) | null = null;

  private send: Sender;
  private nextId = 1;
  private activeDrain: Promise<void> | null = null;

  constructor(send: Sender) {
    this.send = send;
  }

  /* Entries the user still sees a "pending" badge for. */
  get pendingCount(): number {
    return this.entries.filter(
      (e) => e.status === "pending" || e.status === "inflight",
    ).length;
  }

  submit(spotId: string, request: CorrectionRequest): QueueEntry {
    const entry: QueueEntry = {
      id: this.nextId++,
      spotId,
      request,
      status: "pending",
    };
    this.entries.push(entry);
    this.changed();
    void this.drain();
    return entry;
  }

  /* Re-attempt queued work, e.g. after connectivity returns. */
  async flush(): Promise<void> {
    this.offline = false;
    await this.drain();
  }

  /* Resolves when no send is in progress. Pending entries may remain if
     the queue went offline or hit a session conflict. */
  whenIdle(): Promise<void> {
    return this.activeDrain ?? Promise.resolve();
  }

  private changed(): void {
    if (this.onChange) this.onChange();
  }

  private drain(): Promise<void> {
    if (!this.activeDrain) {
      this.activeDrain = this.drainLoop().finally(() => {
        this.activeDrain = null;
      });
    }
    return this.activeDrain;
  }

  private async drainLoop(): Promise<void> {
    if (this.offline) return;
    for (;;) {
      const entry = this.entries.find((e) => e.status === "pending");
      if (!entry || this.needsSessionRefresh) break;
      entry.status = "inflight";
      this.changed();
      try {
        entry.response = await this.send(entry.spotId, entry.request);
        entry.status = "done";
        this.changed();
        if (this.onApplied) this.onApplied(entry);
      } catch (err) {
        if (err instanceof ApiError) {
          if (err.status === 409) {
            // Learner bound to another session; user must refresh.
            entry.status = "conflict";
            this.needsSessionRefresh = true;
          } else {
            entry.status = "failed";
            entry.error = err.message;
          }
          this.changed();
        } else {
          // Transport failure: keep the entry, go offline.
          entry.status = "pending";
          this.offline = true;
          this.changed();
          break;
        }
      }
    }
  }
}
