// Copyright 2026 The lka-adapter Authors
// SPDX-License-Identifier: Apache-2.0

#include "lka/cli.hpp"
#include "lka/runtime.hpp"

int main(int argc, char** argv) {
  lka::tune_allocator();
  return lka::cli::main_entry(argc, argv);
}
