// WebSocket client with exponential-backoff reconnect. Decoding happens in
// the ViewModel; this layer only moves frames and tracks connection state.

export type ConnState = "connecting" | "open" | "closed";

export class Connection {
  url: string;
  state: ConnState = "closed";
  private ws: WebSocket | null = null;
  private backoffMs = 500;
  private maxBackoffMs = 8000;
  private closedByUser = false;
  onMessage: (raw: string, wallNow: number) => void = () => {};
  onState: (state: ConnState) => void = () => {};

  constructor(url: string) {
    this.url = url;
  }

  connect(): void {
    this.closedByUser = false;
    this.open();
  }

  private open(): void {
    this.state = "connecting";
    this.onState(this.state);
    const ws = new WebSocket(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.backoffMs = 500;
      this.state = "open";
      this.onState(this.state);
    };
    ws.onmessage = (ev) => {
      this.onMessage(String(ev.data), performance.now());
    };
    ws.onclose = () => {
      this.state = "closed";
      this.onState(this.state);
      if (!this.closedByUser) {
        setTimeout(() => this.open(), this.backoffMs);
        this.backoffMs = Math.min(this.backoffMs * 2, this.maxBackoffMs);
      }
    };
    ws.onerror = () => {
      ws.close();
    };
  }

  send(data: string): boolean {
    if (this.ws && this.ws.readyState === WebSocket.OPEN) {
      this.ws.send(data);
      return true;
    }
    return false;
  }

  close(): void {
    this.closedByUser = true;
    this.ws?.close();
  }
}
