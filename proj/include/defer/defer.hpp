#pragma once

// Everything: model core, partitioner, codecs, wire protocol, dispatcher,
// compute node, metrics and the bench harness.

#include "defer/bench.hpp"
#include "defer/cluster.hpp"
#include "defer/compute_node.hpp"
#include "defer/dispatcher.hpp"
#include "defer/metrics.hpp"
#include "defer/model_io.hpp"
#include "defer/partitioner.hpp"
#include "defer/synthetic.hpp"
