# stream-engine: frontend, vocoder, wire codec, stream sessions and latency accounting
