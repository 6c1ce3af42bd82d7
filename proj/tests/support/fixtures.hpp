#pragma once

#include <filesystem>
#include <string>

#include "opflayer/case_io.hpp"
#include "opflayer/grid.hpp"

namespace fixtures {

inline std::filesystem::path data(const std::string& name) { return std::filesystem::path(OPFLAYER_DATA_DIR) / name; }

inline const opflayer::RawCase& case57() {
    static const opflayer::RawCase rc = opflayer::load_matpower_file(data("case57.m"));
    return rc;
}

inline const opflayer::GridModel& grid57() {
    static const opflayer::GridModel g = opflayer::build_grid(case57());
    return g;
}

// Slack plus one load bus over a lossless line with x = 0.1.
inline constexpr const char* kTwoBus = R"(function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	230	1	1.1	0.9;
	2	1	50	20	0	0	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
	1	2	0	0.1	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.01	10	0;
];
)";

// Slack, one generator bus and one load bus on a lossy triangle.
inline constexpr const char* kThreeBus = R"(function mpc = threebus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1.02	0	230	1	1.1	0.9;
	2	2	20	5	0	0	1	1.01	0	230	1	1.1	0.9;
	3	1	90	30	0	5	1	1	0	230	1	1.1	0.9;
];
mpc.gen = [
	1	60	0	100	-100	1.02	100	1	250	0;
	2	50	0	80	-80	1.01	100	1	150	10;
];
mpc.branch = [
	1	2	0.02	0.08	0.02	150	0	0	0	0	1	-360	360;
	1	3	0.03	0.12	0.02	150	0	0	0	0	1	-360	360;
	2	3	0.01	0.10	0.01	150	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	3	0.02	12	0;
	2	0	0	3	0.03	15	0;
];
)";

}  // namespace fixtures
