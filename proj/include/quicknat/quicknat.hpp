#pragma once

#include "quicknat/bench.hpp"
#include "quicknat/bytes.hpp"
#include "quicknat/checksum.hpp"
#include "quicknat/config.hpp"
#include "quicknat/conntrack.hpp"
#include "quicknat/datapath.hpp"
#include "quicknat/errors.hpp"
#include "quicknat/nat_pool.hpp"
#include "quicknat/net.hpp"
#include "quicknat/packet.hpp"
#include "quicknat/packet_stream.hpp"
#include "quicknat/pcap.hpp"
#include "quicknat/rule_table.hpp"
#include "quicknat/traffic_gen.hpp"
